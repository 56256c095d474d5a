//! Central finite-difference checks of tape gradients in `f64`.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Floor on the relative-error denominator so gradients that are zero on both
/// sides do not divide by zero.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compare the tape gradient of a scalar objective with central differences.
///
/// `build` records the objective on a fresh tape given one leaf per input and
/// must return a single-element variable. It is called `2n + 1` times, so any
/// randomness inside it has to be reseeded on every call.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut report = GradReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = match tape.grad(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].numel()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = (k, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Shape {
            op: "check_gradients",
            lhs: t.shape().to_vec(),
            rhs: vec![1],
        });
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_matches_closed_form() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(&[x], 1e-4, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            let cube = tape.mul(sq, v[0])?;
            tape.sum(cube)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu's kink at 0 makes the one-sided tape gradient disagree with the
        // symmetric difference quotient
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = check_gradients(&[x], 1e-4, |tape, v| {
            let y = tape.relu(v[0])?;
            tape.sum(y)
        })
        .unwrap();
        assert!(r.max_relative_error > 0.4, "{r:?}");
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(check_gradients(&[x], 1e-4, |tape, v| tape.relu(v[0])).is_err());
    }
}
