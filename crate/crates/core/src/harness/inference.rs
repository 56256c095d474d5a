use super::checkpoint::Checkpoint;
use super::model::{Network, Reference};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{bind, Tape, Tensor};

/// Clips per forward pass at evaluation time.
pub const EVAL_BATCH: usize = 16;

/// Test-time outputs for a list of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// One `[K]` distribution per clip.
    pub probs: Vec<Vec<f32>>,
    /// Expected motion (or teacher) map per clip, `[T', H', W']`.
    pub motion_maps: Vec<Tensor<f32>>,
    /// Raw motion attention logits per clip; empty for the oracle student.
    pub motion_logits: Vec<Tensor<f32>>,
    /// Feature tap per clip, `[T', H', W', C]`, when requested.
    pub features: Vec<Tensor<f32>>,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

fn split_outer(t: &Tensor<f32>) -> Vec<Tensor<f32>> {
    (0..t.shape()[0]).map(|i| t.index_outer(i)).collect()
}

/// Run a checkpoint in eval mode on `clips`, which must match its modality
/// (2-channel flow for the teacher, 3-channel rgb for students).
/// `reference_maps` feeds the oracle student's motion head.
pub fn infer(
    ckpt: &Checkpoint,
    clips: &[&Tensor<f32>],
    reference_maps: Option<&[Tensor<f32>]>,
    keep_features: bool,
) -> Result<Inference> {
    let net = Network::new(&ckpt.config)?;
    let want = net.backbone.in_channels;
    if let Some(c) = clips.iter().find(|c| c.rank() != 4 || c.shape()[3] != want) {
        return Err(Error::Eval(format!(
            "modality mismatch: role {} consumes {want}-channel clips, got {:?}",
            ckpt.config.role,
            c.shape()
        )));
    }
    if let Some(r) = reference_maps {
        if r.len() != clips.len() {
            return Err(Error::Eval(format!(
                "{} reference maps for {} clips",
                r.len(),
                clips.len()
            )));
        }
    }
    let mut out = Inference {
        probs: Vec::with_capacity(clips.len()),
        motion_maps: Vec::with_capacity(clips.len()),
        motion_logits: Vec::new(),
        features: Vec::new(),
    };
    // eval mode draws no randomness; the stream only satisfies the signature
    let mut rng = stream(ckpt.config.seed, "harness/eval");
    let mut stats = ckpt.stats.clone();
    for start in (0..clips.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(clips.len());
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &ckpt.params, false);
        let x = tape.constant(Tensor::stack(&clips[start..end])?);
        let reference = match reference_maps {
            Some(maps) => {
                let refs: Vec<&Tensor<f32>> = maps[start..end].iter().collect();
                Reference {
                    map: Some(tape.constant(Tensor::stack(&refs)?)),
                    features: None,
                }
            }
            None => Reference::default(),
        };
        let fwd = net.forward(&mut tape, &bound, &mut stats, x, reference, false, &mut rng)?;
        let probs = tape.value(fwd.probs);
        let k = probs.shape()[1];
        out.probs.extend(probs.data().chunks(k).map(|c| c.to_vec()));
        out.motion_maps.extend(split_outer(tape.value(fwd.motion)));
        if let Some(l) = fwd.motion_logits {
            out.motion_logits.extend(split_outer(tape.value(l)));
        }
        if keep_features {
            out.features.extend(split_outer(tape.value(fwd.phi_feat)));
        }
    }
    Ok(out)
}
