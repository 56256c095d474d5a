use std::collections::BTreeMap;

use super::{Result, Scalar, Tensor, TensorError};

/// Per-parameter velocity buffers for classical (heavy-ball) momentum SGD:
/// `v <- mu v + g + wd p`, `p <- p - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S = f32> {
    pub velocity: BTreeMap<String, Vec<S>>,
    pub momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> OptimizerState<S> {
    /// Zero velocity for every named parameter.
    pub fn new<'a>(
        params: impl IntoIterator<Item = (&'a String, &'a Tensor<S>)>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Self {
        let velocity = params
            .into_iter()
            .map(|(name, t)| (name.clone(), vec![S::zero(); t.numel()]))
            .collect();
        Self {
            velocity,
            momentum,
            lr,
            weight_decay,
        }
    }

    pub fn step_one(&mut self, name: &str, param: &mut [S], grad: &[S]) -> Result<()> {
        let v = self
            .velocity
            .get_mut(name)
            .ok_or_else(|| TensorError::Optimizer(format!("no state entry for `{name}`")))?;
        if v.len() != param.len() || grad.len() != param.len() {
            return Err(TensorError::Optimizer(format!(
                "`{name}`: param {} grad {} velocity {} lengths disagree",
                param.len(),
                grad.len(),
                v.len()
            )));
        }
        let mu = S::from_f64_lossy(self.momentum);
        let lr = S::from_f64_lossy(self.lr);
        let wd = S::from_f64_lossy(self.weight_decay);
        for ((p, &g), vel) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vel = mu * *vel + g + wd * *p;
            *p = *p - lr * *vel;
        }
        Ok(())
    }

    /// Update every parameter that has a gradient; parameters without one are
    /// treated as having a zero gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<S>>, grads: &BTreeMap<String, Vec<S>>) -> Result<()> {
        for name in grads.keys() {
            if !params.contains_key(name) {
                return Err(TensorError::Optimizer(format!("gradient for unknown `{name}`")));
            }
        }
        for (name, p) in params.iter_mut() {
            match grads.get(name) {
                Some(g) => self.step_one(name, p.data_mut(), g)?,
                None => {
                    let zero = vec![S::zero(); p.numel()];
                    self.step_one(name, p.data_mut(), &zero)?
                }
            }
        }
        Ok(())
    }
}
