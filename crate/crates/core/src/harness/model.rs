use rand::Rng;

use super::config::{AttentionSource, ModelRole, RunConfig, DEFAULT_LAMBDA_FM};
use crate::attention::{gumbel_softmax, init_projection};
use crate::backbone::{forward_features, init_params, BackboneConfig, RunningStats};
use crate::error::{Error, Result};
use crate::losses::{default_lambda, LossInputs};
use crate::recognition::{classify, combine_heads, init_classifier, pool, PoolingMode};
use crate::tensor::{Bound, ParamMap, Scalar, Tape, Var};

pub const BACKBONE_PREFIX: &str = "backbone.";

/// Architecture derived from a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub run: RunConfig,
    pub backbone: BackboneConfig,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[N, K]` class distribution.
    pub probs: Var,
    /// Motion map for students, the single head's map for the teacher.
    /// A Gumbel sample while training probabilistic attention, `p(A)` otherwise.
    pub motion: Var,
    pub appearance: Option<Var>,
    /// Attention logits of the motion (or teacher) head; `None` for the oracle student.
    pub motion_logits: Option<Var>,
    pub phi_feat: Var,
}

struct HeadMap {
    map: Var,
    logits: Var,
}

/// Frozen teacher signals attached to a student batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct Reference {
    /// `[N, T', H', W']` reference motion map.
    pub map: Option<Var>,
    /// `[N, T', H', W', C]` teacher features.
    pub features: Option<Var>,
}

fn head_names(role: ModelRole) -> &'static [&'static str] {
    match role {
        ModelRole::TeacherFlow => &["head"],
        _ => &["motion", "appearance"],
    }
}

fn get(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

impl Network {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let n = run.widths.len();
        let mut strides = vec![[1, 1, 1]; n];
        for s in strides.iter_mut().take(2) {
            *s = [2, 2, 2];
        }
        let backbone = BackboneConfig {
            in_channels: run.role.input_channels(),
            widths: run.widths.clone(),
            strides,
            kernel: 3,
            attn_block: 1,
            attn_channels: run.attn_channels,
            batch_norm: run.batch_norm,
        };
        backbone.validate()?;
        Ok(Self {
            run: run.clone(),
            backbone,
        })
    }

    pub fn pooling(&self) -> PoolingMode {
        PoolingMode {
            residual: self.run.residual,
            literal_eq4: self.run.literal_eq4,
        }
    }

    pub fn grid(&self, clip: [usize; 3]) -> Result<[usize; 3]> {
        self.backbone.grid(clip)
    }

    /// Fresh parameters: backbone first, then each head's `w_a` and `w_r`.
    pub fn init<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(ParamMap<S>, RunningStats<S>)> {
        let (mut params, stats) = init_params(&self.backbone, BACKBONE_PREFIX, rng)?;
        let c = self.backbone.feature_channels();
        for head in head_names(self.run.role) {
            let oracle_motion = self.run.role == ModelRole::StudentOracleAttn && *head == "motion";
            if !oracle_motion {
                params.insert(format!("{head}.w_a"), init_projection(self.backbone.attn_channels, rng));
            }
            params.insert(format!("{head}.w_r"), init_classifier(c, self.run.classes, rng));
        }
        Ok((params, stats))
    }

    fn head_map<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        phi_attn: Var,
        w_a: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<HeadMap> {
        let logits = tape.pointwise_conv(phi_attn, w_a)?;
        let map = match self.run.attention {
            AttentionSource::Prob if training => gumbel_softmax(tape, logits, self.run.temperature, rng)?,
            _ => tape.softmax_slices(logits)?,
        };
        Ok(HeadMap { map, logits })
    }

    fn head_probs<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        map: Var,
        phi_feat: Var,
        w_r: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let pooled = pool(tape, map, phi_feat, self.pooling())?;
        let dropped = tape.dropout(pooled, self.run.dropout, training, rng)?;
        Ok(classify(tape, dropped, w_r)?)
    }

    /// Full forward pass on a `[N, T, H, W, C]` batch. The oracle student
    /// requires `reference.map`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        stats: &mut RunningStats<S>,
        clip: Var,
        reference: Reference,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let taps = forward_features(tape, clip, bound, stats, &self.backbone, BACKBONE_PREFIX, training)?;
        let phi = taps.phi_feat;
        if self.run.role.is_teacher() {
            let head = self.head_map(tape, taps.phi_attn, get(bound, "head.w_a")?, training, rng)?;
            let probs = self.head_probs(tape, head.map, phi, get(bound, "head.w_r")?, training, rng)?;
            return Ok(Forward {
                probs,
                motion: head.map,
                appearance: None,
                motion_logits: Some(head.logits),
                phi_feat: phi,
            });
        }
        let oracle = self.run.role == ModelRole::StudentOracleAttn;
        let motion = if oracle {
            let map = reference
                .map
                .ok_or_else(|| Error::Input("the oracle student needs a reference map".into()))?;
            HeadMap { map, logits: map }
        } else {
            self.head_map(tape, taps.phi_attn, get(bound, "motion.w_a")?, training, rng)?
        };
        let appearance = self.head_map(tape, taps.phi_attn, get(bound, "appearance.w_a")?, training, rng)?;
        let pm = self.head_probs(tape, motion.map, phi, get(bound, "motion.w_r")?, training, rng)?;
        let pa = self.head_probs(tape, appearance.map, phi, get(bound, "appearance.w_r")?, training, rng)?;
        let probs = combine_heads(tape, pm, pa)?;
        Ok(Forward {
            probs,
            motion: motion.map,
            appearance: Some(appearance.map),
            motion_logits: (!oracle).then_some(motion.logits),
            phi_feat: phi,
        })
    }

    /// Effective `(λ1, λ2, λ_fm)` for this role and grid.
    pub fn lambdas(&self, grid: [usize; 3]) -> (f64, f64, f64) {
        let auto = default_lambda(grid);
        let l1 = match self.run.role {
            ModelRole::StudentDistill => self.run.lambda1.unwrap_or(auto),
            _ => 0.0,
        };
        let l2 = match self.run.attention {
            AttentionSource::Prob => self.run.lambda2.unwrap_or(auto),
            AttentionSource::Soft => self.run.lambda2.unwrap_or(0.0),
        };
        let lfm = match self.run.role {
            ModelRole::StudentFeatMatch => self.run.lambda_fm.unwrap_or(DEFAULT_LAMBDA_FM),
            _ => 0.0,
        };
        (l1, l2, lfm)
    }

    /// Assemble the role's objective for one batch.
    pub fn loss_inputs(
        &self,
        forward: &Forward,
        labels: &[usize],
        reference: Reference,
        grid: [usize; 3],
    ) -> Result<LossInputs> {
        let (lambda1, lambda2, lambda_fm) = self.lambdas(grid);
        let mut inputs = LossInputs {
            probs: forward.probs,
            labels: labels.to_vec(),
            distill: None,
            uniform_reg: Vec::new(),
            featmatch: None,
            lambda1,
            lambda2,
            lambda_fm,
        };
        let missing = |what: &str| Error::Input(format!("role {} needs teacher {what}", self.run.role));
        match self.run.role {
            ModelRole::TeacherFlow => inputs.uniform_reg.push(forward.motion),
            ModelRole::StudentBaseline => {
                inputs.uniform_reg.push(forward.motion);
                inputs.uniform_reg.extend(forward.appearance);
            }
            ModelRole::StudentDistill => {
                let target = reference.map.ok_or_else(|| missing("maps"))?;
                inputs.distill = Some((forward.motion, target));
                inputs.uniform_reg.extend(forward.appearance);
            }
            ModelRole::StudentOracleAttn => inputs.uniform_reg.extend(forward.appearance),
            ModelRole::StudentFeatMatch => {
                let target = reference.features.ok_or_else(|| missing("features"))?;
                inputs.featmatch = Some((forward.phi_feat, target));
            }
        }
        if lambda2 == 0.0 {
            inputs.uniform_reg.clear();
        }
        Ok(inputs)
    }
}
