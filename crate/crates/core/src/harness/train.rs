use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::{ModelRole, Plateau, RunConfig};
use super::inference::infer;
use super::model::{Network, Reference};
use crate::attention::gumbel_softmax;
use crate::datagen::{flip_horizontal, SyntheticSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::rng::stream;
use crate::tensor::{bind, OptimizerState, Tape, Tensor, TensorError};

pub const LOG_HEADER: &str = "epoch step ce kl_distill kl_uniform total lr";

/// Epoch means of the loss terms plus training accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub accuracy: f64,
    pub lr: f64,
}

/// Per-step log lines and per-epoch summaries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub lines: Vec<String>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainingLog {
    /// The step log as text, header first.
    pub fn render(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    /// Total loss of every step, in order.
    pub fn totals(&self) -> Vec<f64> {
        self.lines
            .iter()
            .map(|l| l.split(' ').nth(5).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

/// Frozen-teacher outputs for every training clip, computed once.
struct TeacherCache {
    /// Expected maps and logits, indexed `[flipped as usize][sample]`.
    maps: [Vec<Tensor<f32>>; 2],
    logits: [Vec<Tensor<f32>>; 2],
    features: [Vec<Tensor<f32>>; 2],
}

fn teacher_cache(
    teacher: &Checkpoint,
    dataset: &[SyntheticSample],
    flips: bool,
    features: bool,
) -> Result<TeacherCache> {
    let mut cache = TeacherCache {
        maps: [Vec::new(), Vec::new()],
        logits: [Vec::new(), Vec::new()],
        features: [Vec::new(), Vec::new()],
    };
    let orientations = if flips { 2 } else { 1 };
    for o in 0..orientations {
        let flows: Vec<Tensor<f32>> = if o == 0 {
            dataset.iter().map(|s| s.flow.clone()).collect()
        } else {
            dataset.iter().map(|s| flip_horizontal(s).flow).collect()
        };
        let refs: Vec<&Tensor<f32>> = flows.iter().collect();
        let out = infer(teacher, &refs, None, features)?;
        cache.maps[o] = out.motion_maps;
        cache.logits[o] = out.motion_logits;
        cache.features[o] = out.features;
    }
    Ok(cache)
}

fn check_dataset(dataset: &[SyntheticSample], config: &RunConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.label >= config.classes {
            return Err(Error::Dataset(format!(
                "sample {i} has label {} but the model has {} classes",
                s.label, config.classes
            )));
        }
        let needs_flow = config.role.is_teacher() || config.role.needs_teacher();
        if needs_flow && (s.flow.rank() != 4 || s.flow.shape()[3] != 2) {
            return Err(Error::Dataset(format!(
                "sample {i} lacks a 2-channel flow clip required by role {}",
                config.role
            )));
        }
    }
    Ok(())
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = items.first().copied().unwrap_or_default();
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    m.total = sum(|b| b.total);
    m.ce = sum(|b| b.ce);
    m.kl_distill = sum(|b| b.kl_distill);
    m.kl_uniform = sum(|b| b.kl_uniform);
    m.featmatch = sum(|b| b.featmatch);
    m
}

fn run(dataset: &[SyntheticSample], config: &RunConfig, teacher: Option<&Checkpoint>) -> Result<TrainRun> {
    let net = Network::new(config)?;
    check_dataset(dataset, config)?;
    let role = config.role;
    let cache = match (role.needs_teacher(), teacher) {
        (true, Some(t)) => Some(teacher_cache(
            t,
            dataset,
            config.flip,
            role == ModelRole::StudentFeatMatch,
        )?),
        (true, None) => return Err(Error::Config(format!("role {role} requires a teacher checkpoint"))),
        (false, _) => None,
    };
    let teacher_tau = teacher.map_or(1.0, |t| t.config.temperature);

    let shape = dataset[0].rgb.shape();
    let grid = net.grid([shape[0], shape[1], shape[2]])?;

    let mut init_rng = stream(config.seed, "harness/init");
    let (mut params, mut stats) = net.init::<f32, _>(&mut init_rng)?;
    let mut opt = OptimizerState::new(&params, config.lr.initial, config.momentum, config.weight_decay);
    let mut plateau = Plateau::new(config.lr);
    let mut shuffle_rng = stream(config.seed, "harness/shuffle");
    let mut noise_rng = stream(config.seed, "harness/noise");
    let mut augment_rng = stream(config.seed, "harness/augment");
    let mut target_rng = stream(config.seed, "harness/target");

    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut steps = Vec::new();
        let mut correct = 0usize;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| config.flip && augment_rng.random_bool(0.5))
                .collect();
            let clips: Vec<Tensor<f32>> = batch
                .iter()
                .zip(&flips)
                .map(|(&i, &f)| {
                    let s = &dataset[i];
                    match (role.is_teacher(), f) {
                        (true, false) => s.flow.clone(),
                        (false, false) => s.rgb.clone(),
                        (true, true) => flip_horizontal(s).flow,
                        (false, true) => flip_horizontal(s).rgb,
                    }
                })
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset[i].label).collect();

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, true);
            let refs: Vec<&Tensor<f32>> = clips.iter().collect();
            let x = tape.constant(Tensor::stack(&refs)?);
            let mut reference = Reference::default();
            if let Some(cache) = &cache {
                let pick = |src: &[Vec<Tensor<f32>>; 2]| -> Result<Tensor<f32>> {
                    let items: Vec<&Tensor<f32>> =
                        batch.iter().zip(&flips).map(|(&i, &f)| &src[f as usize][i]).collect();
                    Ok(Tensor::stack(&items)?)
                };
                if role == ModelRole::StudentFeatMatch {
                    reference.features = Some(tape.constant(pick(&cache.features)?));
                } else if config.sampled_target {
                    let logits = tape.constant(pick(&cache.logits)?);
                    reference.map = Some(gumbel_softmax(&mut tape, logits, teacher_tau, &mut target_rng)?);
                } else {
                    reference.map = Some(tape.constant(pick(&cache.maps)?));
                }
            }
            let fwd = net.forward(&mut tape, &bound, &mut stats, x, reference, true, &mut noise_rng)?;
            let inputs = net.loss_inputs(&fwd, &labels, reference, grid)?;
            let (loss, breakdown) = total_loss(&mut tape, &inputs)?;
            if !breakdown.total.is_finite() {
                return Err(TensorError::NonFinite { op: "training loss" }.into());
            }
            tape.backward(loss)?;
            let grads: BTreeMap<String, Vec<f32>> = bound
                .iter()
                .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
                .collect();
            opt.step(&mut params, &grads)?;

            let probs = tape.value(fwd.probs);
            let k = probs.shape()[1];
            for (row, &y) in probs.data().chunks(k).zip(&labels) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0;
                correct += (arg == y) as usize;
            }
            let distill_column = if role == ModelRole::StudentFeatMatch {
                breakdown.featmatch
            } else {
                breakdown.kl_distill
            };
            let mut line = String::new();
            let _ = write!(
                line,
                "{epoch} {step} {:.6} {:.6} {:.6} {:.6} {}",
                breakdown.ce, distill_column, breakdown.kl_uniform, breakdown.total, opt.lr
            );
            log.lines.push(line);
            steps.push(breakdown);
        }
        let mean = mean_breakdown(&steps);
        let lr_used = opt.lr;
        opt.lr = plateau.observe(mean.total);
        log.epochs.push(EpochSummary {
            epoch,
            mean,
            accuracy: correct as f64 / dataset.len() as f64,
            lr: lr_used,
        });
    }
    let mut metrics = BTreeMap::new();
    if let Some(last) = log.epochs.last() {
        metrics.insert("train_accuracy".to_string(), last.accuracy);
        metrics.insert("train_loss".to_string(), last.mean.total);
    }
    Ok(TrainRun {
        checkpoint: Checkpoint {
            config: config.clone(),
            params,
            stats,
            velocity: opt.velocity,
            epoch: config.epochs as u64,
            lr: opt.lr,
            metrics,
        },
        log,
    })
}

/// Train the flow teacher on its single attention head.
pub fn train_teacher(dataset: &[SyntheticSample], config: &RunConfig) -> Result<TrainRun> {
    if !config.role.is_teacher() {
        return Err(Error::Config(format!(
            "train_teacher needs role teacher-flow, got {}",
            config.role
        )));
    }
    run(dataset, config, None)
}

/// Train an RGB student. Roles other than the baseline need the frozen teacher.
pub fn train_student(
    dataset: &[SyntheticSample],
    config: &RunConfig,
    teacher: Option<&Checkpoint>,
) -> Result<TrainRun> {
    if config.role.is_teacher() {
        return Err(Error::Config("train_student needs a student role".into()));
    }
    if let Some(t) = teacher {
        if !t.config.role.is_teacher() {
            return Err(Error::Config(format!(
                "reference checkpoint has role {}, expected teacher-flow",
                t.config.role
            )));
        }
    }
    run(dataset, config, teacher)
}
