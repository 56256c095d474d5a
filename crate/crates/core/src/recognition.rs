//! Attention-guided classification heads.
//!
//! A head pools the final features with an attention map (tilted
//! multiplication), optionally adds the average-pooled residual, and applies a
//! bias-free linear classifier followed by a softmax. The dual-head model
//! averages the class distributions of its motion and appearance heads.
//!
//! Pooling divides by `T` so that a uniform map yields the exact global
//! average. With `literal_eq4` set, the raw sum over `(t, h, w)` is used and
//! the residual term is the all-ones tensor instead of the per-slice uniform
//! map.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadId {
    Motion,
    Appearance,
    Single,
}

impl HeadId {
    pub fn name(self) -> &'static str {
        match self {
            HeadId::Motion => "motion",
            HeadId::Appearance => "appearance",
            HeadId::Single => "single",
        }
    }
}

/// Pooling behaviour shared by every head of one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PoolingMode {
    pub residual: bool,
    pub literal_eq4: bool,
}

/// Classifier weights `[C, K]`, N(0, 1/C).
pub fn init_classifier<S: Scalar, R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Tensor<S> {
    let normal = Normal::new(0.0, (1.0 / channels as f64).sqrt()).expect("valid std");
    Tensor::from_fn(vec![channels, classes], |_| S::from_f64_lossy(normal.sample(rng)))
}

/// A `[.., K]` probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution<S = f32> {
    pub probs: Tensor<S>,
}

impl<S: Scalar> ClassDistribution<S> {
    pub fn new(probs: Tensor<S>) -> Result<Self> {
        let k = *probs.shape().last().unwrap_or(&0);
        for row in probs.data().chunks(k.max(1)) {
            let total: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
            if row.iter().any(|&v| !(v >= S::zero())) || (total - 1.0).abs() > 1e-6 {
                return Err(TensorError::Config {
                    op: "class_distribution",
                    msg: format!("row sums to {total} or has negative entries"),
                });
            }
        }
        Ok(Self { probs })
    }

    pub fn classes(&self) -> usize {
        *self.probs.shape().last().unwrap()
    }

    /// Argmax of each row; ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .data()
            .chunks(self.classes())
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `out[c] = s Σ_{t,h,w} A[t,h,w] φ[t,h,w,c]`, `s = 1/T` unless `literal_eq4`.
pub fn tilted_multiply<S: Scalar>(tape: &mut Tape<S>, attn: Var, phi_feat: Var, literal_eq4: bool) -> Result<Var> {
    tape.tilted_multiply(attn, phi_feat, !literal_eq4)
}

/// Attention pooling, with the residual `(A + I) ⊗ φ` when requested.
pub fn pool<S: Scalar>(tape: &mut Tape<S>, attn: Var, phi_feat: Var, mode: PoolingMode) -> Result<Var> {
    let map = if mode.residual {
        let shape = tape.shape(attn).to_vec();
        let ones = if mode.literal_eq4 {
            Tensor::ones(shape)
        } else {
            crate::attention::uniform(&shape)
        };
        let i = tape.constant(ones);
        tape.add(attn, i)?
    } else {
        attn
    };
    tilted_multiply(tape, map, phi_feat, mode.literal_eq4)
}

/// `softmax(pooled · W_r)`.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, pooled: Var, w_r: Var) -> Result<Var> {
    let logits = tape.matmul(pooled, w_r)?;
    tape.softmax_last(logits)
}

/// Single-head prediction `softmax(W_rᵀ (A ⊗ φ))`, no dropout.
pub fn pool_classify<S: Scalar>(
    tape: &mut Tape<S>,
    phi_feat: Var,
    attn: Var,
    w_r: Var,
    mode: PoolingMode,
) -> Result<Var> {
    let pooled = pool(tape, attn, phi_feat, mode)?;
    classify(tape, pooled, w_r)
}

/// Equal-weight average of the two head distributions.
pub fn combine_heads<S: Scalar>(tape: &mut Tape<S>, p_motion: Var, p_appearance: Var) -> Result<Var> {
    let sum = tape.add(p_motion, p_appearance)?;
    tape.scale(sum, S::from_f64_lossy(0.5))
}

/// Both heads end to end: pool each map, classify, average.
pub fn dual_head_classify<S: Scalar>(
    tape: &mut Tape<S>,
    phi_feat: Var,
    attn_motion: Var,
    attn_appearance: Var,
    w_r_motion: Var,
    w_r_appearance: Var,
    mode: PoolingMode,
) -> Result<Var> {
    let pm = pool_classify(tape, phi_feat, attn_motion, w_r_motion, mode)?;
    let pa = pool_classify(tape, phi_feat, attn_appearance, w_r_appearance, mode)?;
    combine_heads(tape, pm, pa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::uniform;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = stream(seed, "t");
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = rand_tensor(shape, seed, 0.0, 1.0);
        let slice = shape[shape.len() - 1] * shape[shape.len() - 2];
        for chunk in t.data_mut().chunks_mut(slice) {
            let s: f64 = chunk.iter().sum();
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn uniform_map_is_global_average() {
        let phi = rand_tensor(&[3, 4, 4, 8], 1, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(uniform(&[3, 4, 4]));
        let f = tape.constant(phi.clone());
        let out = tilted_multiply(&mut tape, a, f, false).unwrap();
        for c in 0..8 {
            let avg: f64 = phi.data().iter().skip(c).step_by(8).sum::<f64>() / 48.0;
            assert!((tape.value(out).data()[c] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_map_selects_features() {
        let phi = rand_tensor(&[2, 3, 3, 4], 2, -1.0, 1.0);
        let mut delta = Tensor::<f64>::zeros(vec![2, 3, 3]);
        delta.data_mut()[4] = 1.0; // t=0, (1,1)
        delta.data_mut()[9 + 2] = 1.0; // t=1, (0,2)
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(delta);
        let f = tape.constant(phi.clone());
        let out = tilted_multiply(&mut tape, a, f, false).unwrap();
        for c in 0..4 {
            let expect = 0.5 * (phi.at(&[0, 1, 1, c]) + phi.at(&[1, 0, 2, c]));
            assert!((tape.value(out).data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(uniform(&[2, 3, 3]));
        let f = tape.constant(Tensor::zeros(vec![2, 3, 4, 5]));
        assert!(matches!(
            tilted_multiply(&mut tape, a, f, false),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(rand_tensor(&[2, 2, 2, 3], 3, -1.0, 1.0));
        let a = tape.constant(rand_map(&[2, 2, 2], 4));
        let w = tape.constant(Tensor::zeros(vec![3, 5]));
        let p = pool_classify(&mut tape, f, a, w, PoolingMode::default()).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn residual_with_uniform_map_doubles_logits() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(rand_tensor(&[2, 3, 3, 4], 5, -1.0, 1.0));
        let a = tape.constant(uniform(&[2, 3, 3]));
        let w = tape.constant(rand_tensor(&[4, 3], 6, -1.0, 1.0));
        let plain = pool(&mut tape, a, f, PoolingMode::default()).unwrap();
        let res = pool(
            &mut tape,
            a,
            f,
            PoolingMode {
                residual: true,
                literal_eq4: false,
            },
        )
        .unwrap();
        let lp = tape.matmul(plain, w).unwrap();
        let lr = tape.matmul(res, w).unwrap();
        for (x, y) in tape.value(lp).data().iter().zip(tape.value(lr).data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_head_examples() {
        let mut tape = Tape::<f64>::new();
        let p1 = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let p2 = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let c = combine_heads(&mut tape, p1, p2).unwrap();
        assert_eq!(tape.value(c).data(), &[0.5, 0.5]);
        let same = combine_heads(&mut tape, p1, p1).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(p1).data());

        let r1 = rand_map(&[1, 1, 6], 7).reshape(vec![6]).unwrap();
        let r2 = rand_map(&[1, 1, 6], 8).reshape(vec![6]).unwrap();
        let a = tape.constant(r1.clone());
        let b = tape.constant(r2.clone());
        let c = combine_heads(&mut tape, a, b).unwrap();
        for i in 0..6 {
            let expect = 0.5 * (r1.data()[i] + r2.data()[i]);
            assert!((tape.value(c).data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_maps_stay_finite() {
        let mut tape = Tape::<f32>::new();
        let mut delta = Tensor::<f32>::zeros(vec![1, 4, 8, 8]);
        for t in 0..4 {
            delta.data_mut()[t * 64 + 63] = 1.0;
        }
        let f = tape.constant(Tensor::full(vec![1, 4, 8, 8, 16], 1e3f32));
        let a = tape.constant(delta);
        let w = tape.constant(Tensor::full(vec![16, 4], 10.0f32));
        for literal_eq4 in [false, true] {
            let mode = PoolingMode {
                residual: true,
                literal_eq4,
            };
            let p = pool_classify(&mut tape, f, a, w, mode).unwrap();
            assert!(tape.value(p).is_finite());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn positive_scaling_preserves_argmax(seed in 0u64..500, scale in 0.1f64..10.0, residual in proptest::bool::ANY) {
            let phi = rand_tensor(&[2, 3, 3, 4], seed, -1.0, 1.0);
            let map = rand_map(&[2, 3, 3], seed + 1);
            let w = rand_tensor(&[4, 5], seed + 2, -1.0, 1.0);
            let mode = PoolingMode { residual, literal_eq4: false };
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(map);
            let f1 = tape.constant(phi.clone());
            let f2 = tape.constant(phi.map(|v| v * scale));
            let wv = tape.constant(w);
            let p1 = pool(&mut tape, a, f1, mode).unwrap();
            let p2 = pool(&mut tape, a, f2, mode).unwrap();
            let l1 = tape.matmul(p1, wv).unwrap();
            let l2 = tape.matmul(p2, wv).unwrap();
            for (x, y) in tape.value(l1).data().iter().zip(tape.value(l2).data()) {
                prop_assert!((x * scale - y).abs() < 1e-9);
            }
            let d1 = tape.softmax_last(l1).unwrap();
            let d2 = tape.softmax_last(l2).unwrap();
            let c1 = ClassDistribution::new(tape.value(d1).clone()).unwrap();
            let c2 = ClassDistribution::new(tape.value(d2).clone()).unwrap();
            prop_assert_eq!(c1.argmax(), c2.argmax());
        }

        #[test]
        fn swapping_heads_is_symmetric(seed in 0u64..500) {
            let phi = rand_tensor(&[2, 3, 3, 4], seed, -1.0, 1.0);
            let m1 = rand_map(&[2, 3, 3], seed + 1);
            let m2 = rand_map(&[2, 3, 3], seed + 2);
            let w1 = rand_tensor(&[4, 6], seed + 3, -1.0, 1.0);
            let w2 = rand_tensor(&[4, 6], seed + 4, -1.0, 1.0);
            let mut tape = Tape::<f64>::new();
            let f = tape.constant(phi);
            let (a1, a2) = (tape.constant(m1), tape.constant(m2));
            let (v1, v2) = (tape.constant(w1), tape.constant(w2));
            let x = dual_head_classify(&mut tape, f, a1, a2, v1, v2, PoolingMode::default()).unwrap();
            let y = dual_head_classify(&mut tape, f, a2, a1, v2, v1, PoolingMode::default()).unwrap();
            let dx = ClassDistribution::new(tape.value(x).clone()).unwrap();
            let dy = ClassDistribution::new(tape.value(y).clone()).unwrap();
            prop_assert_eq!(dx.argmax(), dy.argmax());
            for (p, q) in dx.probs.data().iter().zip(dy.probs.data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
