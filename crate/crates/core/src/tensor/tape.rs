//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations are
//! appended in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::conv::Conv3dGeometry;
use super::{Result, Scalar, Tensor, TensorError, NUMERIC_FLOOR};
use crate::parallel;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddChannelBias {
        x: usize,
        bias: usize,
    },
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SumTrailing {
        x: usize,
        inner: usize,
    },
    Conv3d {
        input: usize,
        kernel: usize,
        geom: Conv3dGeometry,
        cols: Vec<Vec<S>>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        training: bool,
    },
    PointwiseConv {
        x: usize,
        w: usize,
    },
    SoftmaxSlices {
        x: usize,
        slice: usize,
    },
    TiltedMultiply {
        attn: usize,
        feat: usize,
        scale: S,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Nll {
        probs: usize,
        labels: Vec<usize>,
    },
    KlPerSlice {
        a: usize,
        b: usize,
        inner: usize,
    },
    MaxAbsLast {
        x: usize,
        argmax: Vec<usize>,
    },
    L2NormalizeTrailing {
        x: usize,
        inner: usize,
        norms: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation graph plus the values it produced.
pub struct Tape<S = f32> {
    id: u64,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn floor<S: Scalar>() -> S {
    S::from_f64_lossy(NUMERIC_FLOOR)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Graph(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index }
    }

    /// Record a leaf; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.value(v).grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("foreign variable")].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn data(&self, i: usize) -> &[S] {
        self.nodes[i].value.data()
    }

    fn dims(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: fn(usize, usize) -> Op<S>,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.dims(ai) != self.dims(bi) {
            return Err(shape_err(op, self.dims(ai), self.dims(bi)));
        }
        let data = self
            .data(ai)
            .iter()
            .zip(self.data(bi))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.dims(ai).to_vec(), data)?;
        Ok(self.push(value, make(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.nodes[ai].value.map(|x| x * factor);
        Ok(self.push(value, Op::Scale(ai, factor), &[ai]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = self.nodes[ai].value.map(|x| x.max(S::zero()));
        Ok(self.push(value, Op::Relu(ai), &[ai]))
    }

    /// Broadcast-add a `[C]` bias over the trailing channel axis.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(bias)?);
        let c = self.dims(bi);
        if c.len() != 1 || self.dims(xi).last() != Some(&c[0]) {
            return Err(shape_err("add_channel_bias", self.dims(xi), c));
        }
        let b = self.data(bi).to_vec();
        let mut value = self.nodes[xi].value.clone().with_requires_grad(false);
        value.zero_grad();
        for row in value.data_mut().chunks_mut(b.len()) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v = *v + bb);
        }
        Ok(self.push(value, Op::AddChannelBias { x: xi, bias: bi }, &[xi, bi]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.data(ai).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai), &[ai]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let n = S::from_usize(self.data(ai).len()).unwrap();
        let s: S = self.data(ai).iter().copied().sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mean(ai), &[ai]))
    }

    /// Sum over the last `k` axes.
    pub fn sum_trailing(&mut self, a: Var, k: usize) -> Result<Var> {
        let ai = self.idx(a)?;
        let dims = self.dims(ai);
        if k > dims.len() {
            return Err(shape_err("sum_trailing", dims, &[k]));
        }
        let out_shape = dims[..dims.len() - k].to_vec();
        let inner: usize = dims[dims.len() - k..].iter().product();
        let data = self.data(ai).chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SumTrailing { x: ai, inner }, &[ai]))
    }

    /// 3D cross-correlation of a channels-last volume.
    ///
    /// `input` is `[T, H, W, C_in]` or batched `[N, T, H, W, C_in]`;
    /// `kernel` is `[k_t, k_h, k_w, C_in, C_out]`. No bias is added.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        let (xi, ki) = (self.idx(input)?, self.idx(kernel)?);
        let dims = self.dims(xi).to_vec();
        let (batch, sample_dims) = match dims.len() {
            4 => (None, &dims[..]),
            5 => (Some(dims[0]), &dims[1..]),
            _ => return Err(shape_err("conv3d", &dims, self.dims(ki))),
        };
        let geom = Conv3dGeometry::new(sample_dims, self.dims(ki), stride, padding)?;
        let n = batch.unwrap_or(1);
        let x = self.data(xi);
        let k = self.data(ki);
        let per = geom.input_len();
        let results = parallel::map_indexed(n, |s| geom.forward_sample(&x[s * per..(s + 1) * per], k));
        let mut data = Vec::with_capacity(n * geom.output_len());
        let mut cols = Vec::with_capacity(n);
        for (out, c) in results {
            data.extend_from_slice(&out);
            cols.push(c);
        }
        let mut shape = Vec::with_capacity(5);
        if let Some(b) = batch {
            shape.push(b);
        }
        shape.extend_from_slice(&geom.output);
        shape.push(geom.out_channels);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                input: xi,
                kernel: ki,
                geom,
                cols,
            },
            &[xi, ki],
        ))
    }

    fn check_norm_params(&self, xi: usize, gi: usize, bi: usize) -> Result<usize> {
        let c = *self.dims(xi).last().unwrap_or(&0);
        for p in [gi, bi] {
            if self.dims(p) != [c] {
                return Err(shape_err("batch_norm", self.dims(xi), self.dims(p)));
            }
        }
        Ok(c)
    }

    /// Training-mode batch normalization over every axis but the trailing
    /// channel axis. Returns the output and the biased batch mean / variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, Vec<S>, Vec<S>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let c = self.check_norm_params(xi, gi, bi)?;
        let data = self.data(xi);
        let m = data.len() / c;
        let ms = S::from_usize(m).unwrap();
        let mut mean = vec![S::zero(); c];
        for row in data.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
        }
        mean.iter_mut().for_each(|a| *a = *a / ms);
        let mut var = vec![S::zero(); c];
        for row in data.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        var.iter_mut().for_each(|a| *a = *a / ms);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gi), self.data(bi));
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(self.dims(xi).to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                training: true,
            },
            &[xi, gi, bi],
        );
        Ok((v, mean, var))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[S], var: &[S], eps: S) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let c = self.check_norm_params(xi, gi, bi)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gi), self.data(bi));
        let mut xhat = Vec::with_capacity(self.data(xi).len());
        let mut out = Vec::with_capacity(self.data(xi).len());
        for row in self.data(xi).chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(self.dims(xi).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                training: false,
            },
            &[xi, gi, bi],
        ))
    }

    /// Bias-free 1x1 projection: contracts the trailing channel axis with `w`.
    pub fn pointwise_conv(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(features)?, self.idx(weights)?);
        let (fd, wd) = (self.dims(xi), self.dims(wi));
        if wd.len() != 1 || fd.last() != Some(&wd[0]) {
            return Err(shape_err("pointwise_conv", fd, wd));
        }
        let w = self.data(wi);
        let data = self
            .data(xi)
            .chunks(w.len())
            .map(|row| row.iter().zip(w).map(|(&a, &b)| a * b).sum())
            .collect();
        let value = Tensor::new(fd[..fd.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::PointwiseConv { x: xi, w: wi }, &[xi, wi]))
    }

    fn softmax_chunks(&mut self, x: Var, slice: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        if !self.nodes[xi].value.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = Vec::with_capacity(self.data(xi).len());
        for chunk in self.data(xi).chunks(slice) {
            let max = chunk.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            out.extend(chunk.iter().map(|&v| (v - max).exp()));
            let total: S = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(self.dims(xi).to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxSlices { x: xi, slice }, &[xi]))
    }

    /// Softmax over the last two axes, independently for every leading index.
    pub fn softmax_slices(&mut self, logits: Var) -> Result<Var> {
        let dims = self.value(logits).shape();
        if dims.len() < 2 {
            return Err(shape_err("softmax_slices", dims, &[]));
        }
        let slice = dims[dims.len() - 2] * dims[dims.len() - 1];
        self.softmax_chunks(logits, slice)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, logits: Var) -> Result<Var> {
        let dims = self.value(logits).shape();
        let slice = *dims.last().ok_or_else(|| shape_err("softmax_last", dims, &[]))?;
        self.softmax_chunks(logits, slice)
    }

    /// Attention-weighted sum `out[c] = s · Σ_{t,h,w} A[t,h,w] F[t,h,w,c]`
    /// with `s = 1/T` when `normalize` is set and `s = 1` otherwise.
    pub fn tilted_multiply(&mut self, attn: Var, feat: Var, normalize: bool) -> Result<Var> {
        let (ai, fi) = (self.idx(attn)?, self.idx(feat)?);
        let (ad, fd) = (self.dims(ai), self.dims(fi));
        if ad.len() < 3 || fd.len() != ad.len() + 1 || fd[..ad.len()] != ad[..] {
            return Err(shape_err("tilted_multiply", ad, fd));
        }
        let c = fd[fd.len() - 1];
        let t = ad[ad.len() - 3];
        let grid: usize = ad[ad.len() - 3..].iter().product();
        let scale = if normalize {
            S::one() / S::from_usize(t).unwrap()
        } else {
            S::one()
        };
        let (a, f) = (self.data(ai), self.data(fi));
        let lead = a.len() / grid;
        let mut out = vec![S::zero(); lead * c];
        for l in 0..lead {
            let acc = &mut out[l * c..(l + 1) * c];
            for g in 0..grid {
                let w = a[l * grid + g];
                let row = &f[(l * grid + g) * c..(l * grid + g + 1) * c];
                acc.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + w * v);
            }
            acc.iter_mut().for_each(|o| *o = *o * scale);
        }
        let mut shape = ad[..ad.len() - 3].to_vec();
        shape.push(c);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::TiltedMultiply {
                attn: ai,
                feat: fi,
                scale,
            },
            &[ai, fi],
        ))
    }

    /// `[M, K] x [K, N]`; a rank-1 left operand is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ad, bd) = (self.dims(ai).to_vec(), self.dims(bi).to_vec());
        let (m, k, vector) = match ad.len() {
            1 => (1, ad[0], true),
            2 => (ad[0], ad[1], false),
            _ => return Err(shape_err("matmul", &ad, &bd)),
        };
        if bd.len() != 2 || bd[0] != k {
            return Err(shape_err("matmul", &ad, &bd));
        }
        let n = bd[1];
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.data(ai),
            (k as isize, 1),
            self.data(bi),
            (n as isize, 1),
            S::zero(),
            &mut out,
        );
        let shape = if vector { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: ai, b: bi, m, k, n }, &[ai, bi]))
    }

    /// Per-row negative log-likelihood `-ln max(p[label], 1e-12)`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pi = self.idx(probs)?;
        let dims = self.dims(pi).to_vec();
        let classes = *dims.last().ok_or_else(|| shape_err("nll", &dims, &[]))?;
        let rows = self.data(pi).len() / classes;
        if labels.len() != rows {
            return Err(shape_err("nll", &dims, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Config {
                op: "nll",
                msg: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let p = self.data(pi);
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * classes + l].max(floor()).ln())
            .collect();
        let value = Tensor::new(dims[..dims.len() - 1].to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Nll {
                probs: pi,
                labels: labels.to_vec(),
            },
            &[pi],
        ))
    }

    /// `Σ_{t,h,w} a (ln a − ln b)` over the last three axes with `0 ln 0 = 0`
    /// and `b` floored at 1e-12.
    pub fn kl_per_slice(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (ad, bd) = (self.dims(ai), self.dims(bi));
        if ad != bd || ad.len() < 3 {
            return Err(shape_err("kl_per_slice", ad, bd));
        }
        let inner: usize = ad[ad.len() - 3..].iter().product();
        let out_shape = ad[..ad.len() - 3].to_vec();
        let data = self
            .data(ai)
            .chunks(inner)
            .zip(self.data(bi).chunks(inner))
            .map(|(pa, pb)| {
                pa.iter()
                    .zip(pb)
                    .map(|(&x, &y)| {
                        if x > S::zero() {
                            x * (x.ln() - y.max(floor()).ln())
                        } else {
                            S::zero()
                        }
                    })
                    .sum()
            })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::KlPerSlice { a: ai, b: bi, inner }, &[ai, bi]))
    }

    /// `max_c |x[..., c]|`, gradient routed to the first maximizing channel.
    pub fn max_abs_last(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let dims = self.dims(xi).to_vec();
        let c = *dims.last().ok_or_else(|| shape_err("max_abs_last", &dims, &[]))?;
        let mut argmax = Vec::with_capacity(self.data(xi).len() / c);
        let mut out = Vec::with_capacity(argmax.capacity());
        for (r, row) in self.data(xi).chunks(c).enumerate() {
            let mut best = 0;
            for j in 1..c {
                if row[j].abs() > row[best].abs() {
                    best = j;
                }
            }
            argmax.push(r * c + best);
            out.push(row[best].abs());
        }
        let value = Tensor::new(dims[..dims.len() - 1].to_vec(), out)?;
        Ok(self.push(value, Op::MaxAbsLast { x: xi, argmax }, &[xi]))
    }

    /// Divide each block of the last `k` axes by its L2 norm (floored at 1e-12).
    pub fn l2_normalize_trailing(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let dims = self.dims(xi).to_vec();
        if k == 0 || k > dims.len() {
            return Err(shape_err("l2_normalize_trailing", &dims, &[k]));
        }
        let inner: usize = dims[dims.len() - k..].iter().product();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.data(xi).len());
        for block in self.data(xi).chunks(inner) {
            let n = block.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor());
            norms.push(n);
            out.extend(block.iter().map(|&v| v / n));
        }
        let value = Tensor::new(dims, out)?;
        Ok(self.push(value, Op::L2NormalizeTrailing { x: xi, inner, norms }, &[xi]))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {rate}"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < rate { S::zero() } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the `grad` of
    /// every node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.dims(li)
            )));
        }
        if !self.nodes[li].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![S::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            let value = &mut self.nodes[i].value;
            let merged = match value.grad.take() {
                Some(mut prev) => {
                    prev.iter_mut().zip(&g).for_each(|(p, &d)| *p = *p + d);
                    prev
                }
                None => g,
            };
            value.grad = Some(merged);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |j: usize, contrib: Vec<S>| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e = *e + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = self.data(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(y).map(|(&d, &v)| d * v).collect());
                acc(*b, g.iter().zip(x).map(|(&d, &v)| d * v).collect());
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|&d| d * *f).collect()),
            Op::AddChannelBias { x, bias } => {
                acc(*x, g.to_vec());
                let c = self.data(*bias).len();
                let mut db = vec![S::zero(); c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(a, &d)| *a = *a + d);
                }
                acc(*bias, db);
            }
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(&d, &v)| if v > S::zero() { d } else { S::zero() })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; self.data(*a).len()]),
            Op::Mean(a) => {
                let n = self.data(*a).len();
                acc(*a, vec![g[0] / S::from_usize(n).unwrap(); n]);
            }
            Op::SumTrailing { x, inner } => acc(*x, g.iter().flat_map(|&d| std::iter::repeat_n(d, *inner)).collect()),
            Op::Conv3d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let k = self.data(*kernel);
                let per_out = geom.output_len();
                let n = cols.len();
                if self.nodes[*kernel].needs_grad {
                    let parts = parallel::map_indexed(n, |s| {
                        geom.kernel_grad_sample(&cols[s], &g[s * per_out..(s + 1) * per_out])
                    });
                    let mut dk = vec![S::zero(); k.len()];
                    for part in parts {
                        dk.iter_mut().zip(part).for_each(|(a, v)| *a = *a + v);
                    }
                    acc(*kernel, dk);
                }
                if self.nodes[*input].needs_grad {
                    let parts =
                        parallel::map_indexed(n, |s| geom.input_grad_sample(k, &g[s * per_out..(s + 1) * per_out]));
                    acc(*input, parts.concat());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let gm = self.data(*gamma);
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + row[j] * hrow[j];
                        dbeta[j] = dbeta[j] + row[j];
                    }
                }
                if self.nodes[*x].needs_grad {
                    let dx: Vec<S> = if *training {
                        let m = S::from_usize(g.len() / c).unwrap();
                        let mut out = Vec::with_capacity(g.len());
                        for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let v = gm[j] * inv_std[j] / m * (m * row[j] - dbeta[j] - hrow[j] * dgamma[j]);
                                out.push(v);
                            }
                        }
                        out
                    } else {
                        g.chunks(c)
                            .flat_map(|row| (0..c).map(move |j| row[j] * gm[j] * inv_std[j]))
                            .collect()
                    };
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::PointwiseConv { x, w } => {
                let wv = self.data(*w);
                let c = wv.len();
                acc(*x, g.iter().flat_map(|&d| wv.iter().map(move |&wc| d * wc)).collect());
                let mut dw = vec![S::zero(); c];
                for (&d, row) in g.iter().zip(self.data(*x).chunks(c)) {
                    dw.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + d * v);
                }
                acc(*w, dw);
            }
            Op::SoftmaxSlices { x, slice } => {
                let mut dx = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks(*slice).zip(out.chunks(*slice)) {
                    let dot: S = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    dx.extend(gy.iter().zip(y).map(|(&a, &b)| b * (a - dot)));
                }
                acc(*x, dx);
            }
            Op::TiltedMultiply { attn, feat, scale } => {
                let (a, f) = (self.data(*attn), self.data(*feat));
                let c = f.len() / a.len();
                let grid = a.len() / (g.len() / c);
                let mut da = vec![S::zero(); a.len()];
                let mut df = vec![S::zero(); f.len()];
                for (p, dap) in da.iter_mut().enumerate() {
                    let l = p / grid;
                    let gl = &g[l * c..(l + 1) * c];
                    let frow = &f[p * c..(p + 1) * c];
                    *dap = gl.iter().zip(frow).map(|(&d, &v)| d * v).sum::<S>() * *scale;
                    let w = a[p] * *scale;
                    df[p * c..(p + 1) * c].iter_mut().zip(gl).for_each(|(o, &d)| *o = w * d);
                }
                acc(*attn, da);
                acc(*feat, df);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[*a].needs_grad {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.data(*b),
                        (1, n as isize),
                        S::zero(),
                        &mut da,
                    );
                    acc(*a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        S::zero(),
                        &mut db,
                    );
                    acc(*b, db);
                }
            }
            Op::Nll { probs, labels } => {
                let p = self.data(*probs);
                let classes = p.len() / labels.len();
                let mut dp = vec![S::zero(); p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let v = p[r * classes + l];
                    if v > floor() {
                        dp[r * classes + l] = -g[r] / v;
                    }
                }
                acc(*probs, dp);
            }
            Op::KlPerSlice { a, b, inner } => {
                let (pa, pb) = (self.data(*a), self.data(*b));
                let mut da = Vec::with_capacity(pa.len());
                let mut db = Vec::with_capacity(pb.len());
                for (idx, (&x, &y)) in pa.iter().zip(pb).enumerate() {
                    let d = g[idx / inner];
                    let yf = y.max(floor());
                    da.push(d * (x.max(floor()).ln() - yf.ln() + S::one()));
                    db.push(if y > floor() { -d * x / y } else { S::zero() });
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::MaxAbsLast { x, argmax } => {
                let xv = self.data(*x);
                let mut dx = vec![S::zero(); xv.len()];
                for (&d, &j) in g.iter().zip(argmax) {
                    dx[j] = if xv[j] < S::zero() { -d } else { d };
                }
                acc(*x, dx);
            }
            Op::L2NormalizeTrailing { x, inner, norms } => {
                let xv = self.data(*x);
                let mut dx = Vec::with_capacity(xv.len());
                for ((gy, y), (xb, &n)) in g
                    .chunks(*inner)
                    .zip(out.chunks(*inner))
                    .zip(xv.chunks(*inner).zip(norms))
                {
                    let clamped = xb.iter().map(|&v| v * v).sum::<S>().sqrt() < floor();
                    if clamped {
                        dx.extend(gy.iter().map(|&d| d / n));
                    } else {
                        let dot: S = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        dx.extend(gy.iter().zip(y).map(|(&d, &v)| (d - v * dot) / n));
                    }
                }
                acc(*x, dx);
            }
        }
    }
}
