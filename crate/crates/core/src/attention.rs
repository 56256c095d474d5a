//! Attention generation from the attention-source features.
//!
//! Both generators project the features with a bias-free 1x1 convolution and
//! normalize every temporal slice with a softmax. The probabilistic variant
//! perturbs the logits with Gumbel noise during training and falls back to the
//! expected map `p(A)` at test time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Tolerance on the per-slice sum of a valid attention map.
pub const SLICE_SUM_TOL: f64 = 1e-5;

/// Standard deviation of the attention projection initialization.
pub const W_A_INIT_STD: f64 = 0.01;

/// Lower and upper clamp on the uniform draw behind each Gumbel variate.
const GUMBEL_U_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Soft,
    ProbSample,
    ProbExpected,
    TeacherReference,
}

/// A `[.., T, H, W]` map whose temporal slices are distributions over `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S = f32> {
    pub values: Tensor<S>,
    pub kind: AttentionKind,
}

impl<S: Scalar> AttentionMap<S> {
    /// Wrap `values`, checking nonnegativity and per-slice normalization.
    pub fn new(values: Tensor<S>, kind: AttentionKind) -> Result<Self> {
        let map = Self { values, kind };
        map.validate()?;
        Ok(map)
    }

    pub fn from_tape(tape: &Tape<S>, var: Var, kind: AttentionKind) -> Result<Self> {
        Self::new(tape.value(var).clone(), kind)
    }

    pub fn grid(&self) -> [usize; 3] {
        let d = self.values.shape();
        let r = d.len();
        [d[r - 3], d[r - 2], d[r - 1]]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.values.shape();
        if dims.len() < 3 {
            return Err(TensorError::Shape {
                op: "attention_map",
                lhs: dims.to_vec(),
                rhs: vec![],
            });
        }
        let slice = dims[dims.len() - 2] * dims[dims.len() - 1];
        for (t, chunk) in self.values.data().chunks(slice).enumerate() {
            if chunk.iter().any(|&v| !(v >= S::zero())) {
                return Err(TensorError::Config {
                    op: "attention_map",
                    msg: format!("slice {t} has a negative or NaN cell"),
                });
            }
            let total: f64 = chunk.iter().map(|v| v.to_f64_lossy()).sum();
            if (total - 1.0).abs() > SLICE_SUM_TOL {
                return Err(TensorError::Config {
                    op: "attention_map",
                    msg: format!("slice {t} sums to {total}"),
                });
            }
        }
        Ok(())
    }

    /// One `[H, W]` slice, addressed by flattened leading index.
    pub fn slice(&self, index: usize) -> &[S] {
        let [_, h, w] = self.grid();
        &self.values.data()[index * h * w..(index + 1) * h * w]
    }
}

/// Per-slice uniform map of the given shape.
pub fn uniform<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    let r = shape.len();
    let cells = S::from_usize(shape[r - 2] * shape[r - 1]).unwrap();
    Tensor::full(shape.to_vec(), S::one() / cells)
}

/// Attention projection weights, i.i.d. N(0, 0.01²).
pub fn init_projection<S: Scalar, R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Tensor<S> {
    let normal = Normal::new(0.0, W_A_INIT_STD).expect("valid std");
    Tensor::from_fn(vec![channels], |_| S::from_f64_lossy(normal.sample(rng)))
}

/// Deterministic soft attention: `softmax_slices(w_a * phi)`.
pub fn soft_attention<S: Scalar>(tape: &mut Tape<S>, phi_attn: Var, w_a: Var) -> Result<Var> {
    let logits = tape.pointwise_conv(phi_attn, w_a)?;
    tape.softmax_slices(logits)
}

/// Test-time probabilistic attention, the expected map `p(A)`. Numerically
/// identical to [`soft_attention`].
pub fn prob_attention_expected<S: Scalar>(tape: &mut Tape<S>, phi_attn: Var, w_a: Var) -> Result<Var> {
    soft_attention(tape, phi_attn, w_a)
}

/// Standard Gumbel noise `-ln(-ln u)` with `u` clamped into `[1e-12, 1 - 1e-12]`.
pub fn gumbel_noise<S: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.random::<f64>().clamp(GUMBEL_U_MIN, 1.0 - GUMBEL_U_MIN);
        S::from_f64_lossy(-(-u.ln()).ln())
    })
}

/// Relaxed sample `softmax((logits + G) / tau)` per slice. Gradients flow to
/// the features and projection, not to the noise.
pub fn prob_attention_sample<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    phi_attn: Var,
    w_a: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(TensorError::Config {
            op: "prob_attention_sample",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let logits = tape.pointwise_conv(phi_attn, w_a)?;
    gumbel_softmax(tape, logits, temperature, rng)
}

/// Gumbel-softmax relaxation applied to precomputed logits.
pub fn gumbel_softmax<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    logits: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    let noise = gumbel_noise(tape.shape(logits), rng);
    let g = tape.constant(noise);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, S::from_f64_lossy(1.0 / temperature))?;
    tape.softmax_slices(scaled)
}
