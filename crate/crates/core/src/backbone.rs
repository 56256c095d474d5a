//! Small 3D-convolutional feature extractor with two taps.
//!
//! Each block is `conv3d -> batch norm -> relu` (or `conv3d + bias -> relu`
//! without batch norm). The attention tap is the output of block
//! `attn_block`, projected by a bias-free 1x1x1 convolution to
//! `attn_channels`; the feature tap is the output of the last block. Blocks
//! after `attn_block` must keep stride 1 so both taps share one grid.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamMap, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic at every update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<[usize; 3]>,
    pub kernel: usize,
    pub attn_block: usize,
    pub attn_channels: usize,
    pub batch_norm: bool,
}

impl BackboneConfig {
    /// Three blocks, widths 16/32/64, strides 2/2/1, attention from block 2.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32, 64],
            strides: vec![[2, 2, 2], [2, 2, 2], [1, 1, 1]],
            kernel: 3,
            attn_block: 1,
            attn_channels: 32,
            batch_norm: true,
        }
    }

    pub fn rgb() -> Self {
        Self::desk(3)
    }

    pub fn flow() -> Self {
        Self::desk(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("backbone: {msg}")));
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad(format!(
                "{} widths but {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.in_channels == 0 || self.attn_channels == 0 || self.widths.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return bad("strides must be positive".into());
        }
        if self.attn_block >= self.widths.len() {
            return bad(format!("attention block {} out of range", self.attn_block));
        }
        if self.strides[self.attn_block + 1..].iter().any(|s| *s != [1, 1, 1]) {
            return bad("blocks after the attention tap must have unit stride".into());
        }
        Ok(())
    }

    /// Per-axis product of all strides.
    pub fn total_stride(&self) -> [usize; 3] {
        self.strides
            .iter()
            .fold([1, 1, 1], |acc, s| [acc[0] * s[0], acc[1] * s[1], acc[2] * s[2]])
    }

    /// Attention/feature grid for a `[T, H, W]` clip.
    pub fn grid(&self, clip: [usize; 3]) -> Result<[usize; 3]> {
        let stride = self.total_stride();
        for axis in 0..3 {
            if !clip[axis].is_multiple_of(stride[axis]) {
                return Err(Error::Config(format!(
                    "clip dims {clip:?} must be divisible by the cumulative stride {stride:?}"
                )));
            }
        }
        Ok([clip[0] / stride[0], clip[1] / stride[1], clip[2] / stride[2]])
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn pad(&self) -> [usize; 3] {
        [self.kernel / 2; 3]
    }
}

/// Output of the two backbone taps, both `[N, T', H', W', C]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTaps {
    pub phi_attn: Var,
    pub phi_feat: Var,
}

/// Running batch-norm statistics, keyed `"{prefix}bn{i}.running_mean"` etc.
pub type RunningStats<S> = BTreeMap<String, Vec<S>>;

fn conv_name(prefix: &str, i: usize) -> String {
    format!("{prefix}conv{i}.kernel")
}

/// He-normal kernels, unit/zero batch-norm affine, zero biases.
pub fn init_params<S: Scalar, R: Rng + ?Sized>(
    config: &BackboneConfig,
    prefix: &str,
    rng: &mut R,
) -> Result<(ParamMap<S>, RunningStats<S>)> {
    config.validate()?;
    let mut params = ParamMap::new();
    let mut stats = RunningStats::new();
    let k = config.kernel;
    let mut cin = config.in_channels;
    for (i, &cout) in config.widths.iter().enumerate() {
        let fan_in = (k * k * k * cin) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        params.insert(
            conv_name(prefix, i),
            Tensor::from_fn(vec![k, k, k, cin, cout], |_| S::from_f64_lossy(normal.sample(rng))),
        );
        if config.batch_norm {
            params.insert(format!("{prefix}bn{i}.gamma"), Tensor::ones(vec![cout]));
            params.insert(format!("{prefix}bn{i}.beta"), Tensor::zeros(vec![cout]));
            stats.insert(format!("{prefix}bn{i}.running_mean"), vec![S::zero(); cout]);
            stats.insert(format!("{prefix}bn{i}.running_var"), vec![S::one(); cout]);
        } else {
            params.insert(format!("{prefix}conv{i}.bias"), Tensor::zeros(vec![cout]));
        }
        cin = cout;
    }
    let ca = config.widths[config.attn_block];
    let normal = Normal::new(0.0, (1.0 / ca as f64).sqrt()).expect("valid std");
    params.insert(
        format!("{prefix}attn_proj.kernel"),
        Tensor::from_fn(vec![1, 1, 1, ca, config.attn_channels], |_| {
            S::from_f64_lossy(normal.sample(rng))
        }),
    );
    Ok((params, stats))
}

fn lookup(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
}

/// Run the backbone on a `[N, T, H, W, C_in]` clip batch.
///
/// In training mode batch norm uses batch statistics and folds them into
/// `stats`; in eval mode it uses `stats` unchanged.
pub fn forward_features<S: Scalar>(
    tape: &mut Tape<S>,
    clip: Var,
    bound: &Bound,
    stats: &mut RunningStats<S>,
    config: &BackboneConfig,
    prefix: &str,
    training: bool,
) -> Result<FeatureTaps> {
    config.validate()?;
    let dims = tape.shape(clip).to_vec();
    if dims.len() != 5 || dims[4] != config.in_channels {
        return Err(Error::Config(format!(
            "backbone expects [N, T, H, W, {}] input, got {dims:?}",
            config.in_channels
        )));
    }
    config.grid([dims[1], dims[2], dims[3]])?;
    let pad = config.pad();
    let mut x = clip;
    let mut attn_src = None;
    for i in 0..config.widths.len() {
        let kernel = lookup(bound, &conv_name(prefix, i))?;
        x = tape.conv3d(x, kernel, config.strides[i], pad)?;
        if config.batch_norm {
            let gamma = lookup(bound, &format!("{prefix}bn{i}.gamma"))?;
            let beta = lookup(bound, &format!("{prefix}bn{i}.beta"))?;
            let mean_key = format!("{prefix}bn{i}.running_mean");
            let var_key = format!("{prefix}bn{i}.running_var");
            let eps = S::from_f64_lossy(BN_EPS);
            if training {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = S::from_f64_lossy(BN_MOMENTUM);
                let one_minus = S::one() - m;
                for (key, batch) in [(mean_key, mean), (var_key, var)] {
                    let run = stats
                        .get_mut(&key)
                        .ok_or_else(|| Error::Config(format!("missing statistic `{key}`")))?;
                    run.iter_mut().zip(batch).for_each(|(r, b)| *r = m * *r + one_minus * b);
                }
                x = y;
            } else {
                let missing = |k: &str| Error::Config(format!("missing statistic `{k}`"));
                let mean = stats.get(&mean_key).ok_or_else(|| missing(&mean_key))?;
                let var = stats.get(&var_key).ok_or_else(|| missing(&var_key))?;
                x = tape.batch_norm_eval(x, gamma, beta, mean, var, eps)?;
            }
        } else {
            let bias = lookup(bound, &format!("{prefix}conv{i}.bias"))?;
            x = tape.add_channel_bias(x, bias)?;
        }
        x = tape.relu(x)?;
        if i == config.attn_block {
            attn_src = Some(x);
        }
    }
    let proj = lookup(bound, &format!("{prefix}attn_proj.kernel"))?;
    let phi_attn = tape.conv3d(attn_src.expect("validated"), proj, [1, 1, 1], [0, 0, 0])?;
    Ok(FeatureTaps { phi_attn, phi_feat: x })
}
