//! Training objectives.
//!
//! All batch losses are means over the leading batch axis of the per-sample
//! terms. Per sample, the objective is
//!
//! ```text
//! CE(ŷ, y) + λ1 Σ_t KL[A_M(t) ‖ Ã_M(t)] + λ2 Σ_maps Σ_t KL[A(t) ‖ U] + λ_fm FM
//! ```
//!
//! with `λ1 = λ2 = 1 / (T'·H'·W')` by default. The distillation target is
//! expected to be a tape constant so no gradient reaches the teacher.

use crate::attention::uniform;
use crate::tensor::{Result, Scalar, Tape, Var};

/// `1 / (T'·H'·W')` for an attention grid.
pub fn default_lambda(grid: [usize; 3]) -> f64 {
    1.0 / (grid[0] * grid[1] * grid[2]) as f64
}

/// Mean cross-entropy `−ln max(p[label], 1e-12)` over the batch.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, probs: Var, labels: &[usize]) -> Result<Var> {
    let per_sample = tape.nll(probs, labels)?;
    tape.mean(per_sample)
}

/// Per-sample `Σ_t KL[a(t) ‖ b(t)]`.
pub fn kl_per_slice<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    tape.kl_per_slice(a, b)
}

/// Per-sample `Σ_t KL[a(t) ‖ U]` against the per-slice uniform distribution.
pub fn kl_to_uniform<S: Scalar>(tape: &mut Tape<S>, a: Var) -> Result<Var> {
    let u = uniform(tape.shape(a));
    let u = tape.constant(u);
    tape.kl_per_slice(a, u)
}

/// Per-sample feature matching: channel-wise max-abs spatial maps, each
/// L2-normalized over `(t, h, w)`, compared by squared L2 distance.
pub fn featmatch_loss<S: Scalar>(tape: &mut Tape<S>, student: Var, teacher: Var) -> Result<Var> {
    let ms = tape.max_abs_last(student)?;
    let mt = tape.max_abs_last(teacher)?;
    let ns = tape.l2_normalize_trailing(ms, 3)?;
    let nt = tape.l2_normalize_trailing(mt, 3)?;
    let d = tape.sub(ns, nt)?;
    let sq = tape.mul(d, d)?;
    tape.sum_trailing(sq, 3)
}

/// Scalar values of every loss term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl_distill: f64,
    pub kl_uniform: f64,
    pub featmatch: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_fm: f64,
}

impl LossBreakdown {
    /// Recompute the total from the parts.
    pub fn recombined(&self) -> f64 {
        self.ce + self.lambda1 * self.kl_distill + self.lambda2 * self.kl_uniform + self.lambda_fm * self.featmatch
    }
}

/// Everything that may enter the objective for one batch.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub probs: Var,
    pub labels: Vec<usize>,
    /// `(student motion map, frozen teacher map)`.
    pub distill: Option<(Var, Var)>,
    /// Maps pulled toward the uniform prior.
    pub uniform_reg: Vec<Var>,
    /// `(student features, frozen teacher features)`.
    pub featmatch: Option<(Var, Var)>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_fm: f64,
}

/// Build the combined objective on `tape`; returns the scalar loss and its breakdown.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, inputs: &LossInputs) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown {
        lambda1: inputs.lambda1,
        lambda2: inputs.lambda2,
        lambda_fm: inputs.lambda_fm,
        ..Default::default()
    };
    let ce = cross_entropy(tape, inputs.probs, &inputs.labels)?;
    breakdown.ce = tape.value(ce).data()[0].to_f64_lossy();
    let mut total = ce;
    if let Some((student, teacher)) = inputs.distill {
        let kl = kl_per_slice(tape, student, teacher)?;
        let kl = tape.mean(kl)?;
        breakdown.kl_distill = tape.value(kl).data()[0].to_f64_lossy();
        let weighted = tape.scale(kl, S::from_f64_lossy(inputs.lambda1))?;
        total = tape.add(total, weighted)?;
    }
    let mut reg_sum = 0.0;
    for &map in &inputs.uniform_reg {
        let kl = kl_to_uniform(tape, map)?;
        let kl = tape.mean(kl)?;
        reg_sum += tape.value(kl).data()[0].to_f64_lossy();
        let weighted = tape.scale(kl, S::from_f64_lossy(inputs.lambda2))?;
        total = tape.add(total, weighted)?;
    }
    breakdown.kl_uniform = reg_sum;
    if let Some((student, teacher)) = inputs.featmatch {
        let fm = featmatch_loss(tape, student, teacher)?;
        let fm = tape.mean(fm)?;
        breakdown.featmatch = tape.value(fm).data()[0].to_f64_lossy();
        let weighted = tape.scale(fm, S::from_f64_lossy(inputs.lambda_fm))?;
        total = tape.add(total, weighted)?;
    }
    breakdown.total = tape.value(total).data()[0].to_f64_lossy();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::{Tensor, TensorError};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "map");
        let mut t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.01..1.0));
        let slice = shape[shape.len() - 1] * shape[shape.len() - 2];
        for chunk in t.data_mut().chunks_mut(slice) {
            let s: f64 = chunk.iter().sum();
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let onehot = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, onehot, &[1]).unwrap();
        assert_eq!(tape.value(ce).data()[0], 0.0);
        let uni = tape.constant(Tensor::full(vec![1, 4], 0.25));
        for label in 0..4 {
            let ce = cross_entropy(&mut tape, uni, &[label]).unwrap();
            assert!((tape.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);
        }
        let p = rand_map(&[1, 1, 5], 1).reshape(vec![1, 5]).unwrap();
        let pv = tape.constant(p.clone());
        let ce = cross_entropy(&mut tape, pv, &[3]).unwrap();
        assert!((tape.value(ce).data()[0] + p.data()[3].ln()).abs() < 1e-9);
        assert!(matches!(
            cross_entropy(&mut tape, pv, &[5]),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::<f64>::new();
        let a = rand_map(&[3, 2, 2], 2);
        let av = tape.constant(a.clone());
        let same = kl_per_slice(&mut tape, av, av).unwrap();
        assert!(tape.value(same).data()[0].abs() < 1e-15);

        let mut delta = Tensor::zeros(vec![1, 2, 2]);
        delta.data_mut()[2] = 1.0;
        let d = tape.constant(delta);
        let kl = kl_to_uniform(&mut tape, d).unwrap();
        assert!((tape.value(kl).data()[0] - 4f64.ln()).abs() < 1e-12);

        let b = rand_map(&[3, 2, 2], 3);
        let bv = tape.constant(b.clone());
        let kl = kl_per_slice(&mut tape, av, bv).unwrap();
        let mut oracle = 0.0;
        for t in 0..3 {
            for cell in 0..4 {
                let (x, y) = (a.data()[t * 4 + cell], b.data()[t * 4 + cell]);
                oracle += x * (x / y).ln();
            }
        }
        assert!((tape.value(kl).data()[0] - oracle).abs() < 1e-6);

        let wrong = tape.constant(rand_map(&[3, 2, 3], 4));
        assert!(matches!(
            kl_per_slice(&mut tape, av, wrong),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn lambda_on_desk_grid() {
        assert_eq!(default_lambda([4, 8, 8]), 0.00390625);
    }

    fn inputs_for(tape: &mut Tape<f64>, seed: u64, l1: f64, l2: f64) -> (LossInputs, Var) {
        let mut rng = stream(seed, "probs");
        let probs = rand_map(&[1, 2, 6], seed).reshape(vec![2, 6]).unwrap();
        let p = tape.param(probs);
        let am = tape.param(rand_map(&[2, 4, 8, 8], seed + 1));
        let at = tape.param(rand_map(&[2, 4, 8, 8], seed + 2));
        let aa = tape.param(rand_map(&[2, 4, 8, 8], seed + 3));
        let inputs = LossInputs {
            probs: p,
            labels: vec![rng.random_range(0..6), rng.random_range(0..6)],
            distill: Some((am, at)),
            uniform_reg: vec![aa],
            featmatch: None,
            lambda1: l1,
            lambda2: l2,
            lambda_fm: 0.0,
        };
        (inputs, at)
    }

    #[test]
    fn vanishing_kl_terms_leave_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let lambda = default_lambda([4, 8, 8]);
        let p = tape.constant(rand_map(&[1, 1, 4], 9).reshape(vec![1, 4]).unwrap());
        let am = tape.constant(rand_map(&[1, 4, 8, 8], 10));
        let u = tape.constant(uniform(&[1, 4, 8, 8]));
        let inputs = LossInputs {
            probs: p,
            labels: vec![2],
            distill: Some((am, am)),
            uniform_reg: vec![u],
            featmatch: None,
            lambda1: lambda,
            lambda2: lambda,
            lambda_fm: 0.0,
        };
        let (_, b) = total_loss(&mut tape, &inputs).unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn zero_lambda_detaches_teacher() {
        let mut tape = Tape::<f64>::new();
        let (inputs, teacher) = inputs_for(&mut tape, 20, 0.0, 0.01);
        let (loss, _) = total_loss(&mut tape, &inputs).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(teacher).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn featmatch_examples() {
        let mut rng = stream(30, "fm");
        let f = Tensor::<f64>::from_fn(vec![1, 2, 2, 2, 3], |_| rng.random_range(0.1..1.0));
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(f.clone());
        let same = featmatch_loss(&mut tape, s, s).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let t2 = tape.constant(f.map(|v| 2.0 * v));
        let scaled = featmatch_loss(&mut tape, s, t2).unwrap();
        assert!(tape.value(scaled).data()[0].abs() < 1e-12);

        let g = Tensor::<f64>::from_fn(vec![1, 2, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let gv = tape.constant(g.clone());
        let fm = featmatch_loss(&mut tape, s, gv).unwrap();
        let oracle_map = |x: &Tensor<f64>| -> Vec<f64> {
            let m: Vec<f64> = x
                .data()
                .chunks(3)
                .map(|c| c.iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .collect();
            let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            m.iter().map(|v| v / n).collect()
        };
        let (ms, mt) = (oracle_map(&f), oracle_map(&g));
        let oracle: f64 = ms.iter().zip(&mt).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((tape.value(fm).data()[0] - oracle).abs() < 1e-6);
    }

    #[test]
    fn featmatch_zero_features_do_not_fail() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(vec![1, 1, 2, 2, 2]));
        let o = tape.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
        let fm = featmatch_loss(&mut tape, z, o).unwrap();
        assert!((tape.value(fm).data()[0] - 1.0).abs() < 1e-12);
        tape.backward(fm).unwrap();
        assert!(tape.value(z).grad().unwrap().iter().all(|g| g.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kl_is_nonnegative_and_zero_on_identity(seed in 0u64..10_000) {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(rand_map(&[3, 2, 3], seed));
            let b = tape.constant(rand_map(&[3, 2, 3], seed + 7));
            let kl = kl_per_slice(&mut tape, a, b).unwrap();
            prop_assert!(tape.value(kl).data()[0] > 0.0);
            let same = kl_per_slice(&mut tape, a, a).unwrap();
            prop_assert!(tape.value(same).data()[0].abs() < 1e-12);
        }

        #[test]
        fn breakdown_identity_holds(seed in 0u64..10_000, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let mut tape = Tape::<f64>::new();
            let (inputs, _) = inputs_for(&mut tape, seed, l1, l2);
            let (_, b) = total_loss(&mut tape, &inputs).unwrap();
            prop_assert!((b.total - b.recombined()).abs() < 1e-9);
            prop_assert!(b.kl_distill >= -1e-9 && b.kl_uniform >= -1e-9);
        }

        #[test]
        fn featmatch_is_scale_invariant(seed in 0u64..10_000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let mut rng = stream(seed, "fm");
            let f = Tensor::<f64>::from_fn(vec![2, 2, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
            let g = Tensor::<f64>::from_fn(vec![2, 2, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
            let mut tape = Tape::<f64>::new();
            let (fv, gv) = (tape.constant(f.clone()), tape.constant(g.clone()));
            let (fs, gs) = (tape.constant(f.map(|v| v * a)), tape.constant(g.map(|v| v * b)));
            let base = featmatch_loss(&mut tape, fv, gv).unwrap();
            let scaled = featmatch_loss(&mut tape, fs, gs).unwrap();
            for (x, y) in tape.value(base).data().iter().zip(tape.value(scaled).data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
