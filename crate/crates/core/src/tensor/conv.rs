// im2col lowering of 3D cross-correlation onto GEMM.

use super::{Result, Scalar, TensorError};

/// Shape bookkeeping for one `conv3d` call on channels-last volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub input: [usize; 3],
    pub in_channels: usize,
    pub kernel: [usize; 3],
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    /// `input` is `[T, H, W, C_in]`, `kernel` is `[k_t, k_h, k_w, C_in, C_out]`.
    pub fn new(input: &[usize], kernel: &[usize], stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 5 || input[3] != kernel[3] {
            return Err(TensorError::Shape {
                op: "conv3d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride.contains(&0) {
            return Err(TensorError::Config {
                op: "conv3d",
                msg: format!("strides must be positive, got {stride:?}"),
            });
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * padding[axis];
            if padded < kernel[axis] {
                return Err(TensorError::Config {
                    op: "conv3d",
                    msg: format!(
                        "kernel extent {} exceeds padded input {} on axis {axis}",
                        kernel[axis], padded
                    ),
                });
            }
            output[axis] = (padded - kernel[axis]) / stride[axis] + 1;
        }
        Ok(Self {
            input: [input[0], input[1], input[2]],
            in_channels: input[3],
            kernel: [kernel[0], kernel[1], kernel[2]],
            out_channels: kernel[4],
            stride,
            padding,
            output,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.in_channels
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn output_len(&self) -> usize {
        self.positions() * self.out_channels
    }

    /// Visit every (patch row, patch column, input offset) triple that lands
    /// inside the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [to, ho, wo] = self.output;
        let c = self.in_channels;
        let k = self.patch_len();
        let mut row = 0;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut col = 0;
                    for dt in 0..kt {
                        let it = (ot * self.stride[0] + dt) as isize - self.padding[0] as isize;
                        for dh in 0..kh {
                            let ih = (oh * self.stride[1] + dh) as isize - self.padding[1] as isize;
                            for dw in 0..kw {
                                let iw = (ow * self.stride[2] + dw) as isize - self.padding[2] as isize;
                                let inside = it >= 0
                                    && ih >= 0
                                    && iw >= 0
                                    && (it as usize) < ti
                                    && (ih as usize) < hi
                                    && (iw as usize) < wi;
                                if inside {
                                    let base = ((it as usize * hi + ih as usize) * wi + iw as usize) * c;
                                    f(row * k + col, base, c);
                                }
                                col += c;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub(crate) fn im2col<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.positions() * self.patch_len()];
        self.for_each_tap(|dst, src, c| cols[dst..dst + c].copy_from_slice(&input[src..src + c]));
        cols
    }

    pub(crate) fn col2im_add<S: Scalar>(&self, cols: &[S], input_grad: &mut [S]) {
        self.for_each_tap(|src, dst, c| {
            for (g, &v) in input_grad[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                *g = *g + v;
            }
        });
    }

    /// Forward for one sample; returns `(output, cols)` with `cols` kept for backward.
    pub(crate) fn forward_sample<S: Scalar>(&self, input: &[S], kernel: &[S]) -> (Vec<S>, Vec<S>) {
        let cols = self.im2col(input);
        let (p, k, co) = (self.positions(), self.patch_len(), self.out_channels);
        let mut out = vec![S::zero(); p * co];
        S::gemm(
            p,
            k,
            co,
            &cols,
            (k as isize, 1),
            kernel,
            (co as isize, 1),
            S::zero(),
            &mut out,
        );
        (out, cols)
    }

    /// Kernel gradient contribution `cols^T · dout` for one sample.
    pub(crate) fn kernel_grad_sample<S: Scalar>(&self, cols: &[S], dout: &[S]) -> Vec<S> {
        let (p, k, co) = (self.positions(), self.patch_len(), self.out_channels);
        let mut dk = vec![S::zero(); k * co];
        S::gemm(
            k,
            p,
            co,
            cols,
            (1, k as isize),
            dout,
            (co as isize, 1),
            S::zero(),
            &mut dk,
        );
        dk
    }

    /// Input gradient `col2im(dout · kernel^T)` for one sample.
    pub(crate) fn input_grad_sample<S: Scalar>(&self, kernel: &[S], dout: &[S]) -> Vec<S> {
        let (p, k, co) = (self.positions(), self.patch_len(), self.out_channels);
        let mut dcols = vec![S::zero(); p * k];
        S::gemm(
            p,
            co,
            k,
            dout,
            (co as isize, 1),
            kernel,
            (1, co as isize),
            S::zero(),
            &mut dcols,
        );
        let mut dx = vec![S::zero(); self.input_len()];
        self.col2im_add(&dcols, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_floor_rule() {
        let g = Conv3dGeometry::new(&[16, 32, 32, 3], &[3, 3, 3, 3, 16], [2, 2, 2], [1, 1, 1]).unwrap();
        assert_eq!(g.output, [8, 16, 16]);
        let g = Conv3dGeometry::new(&[5, 7, 7, 1], &[3, 3, 3, 1, 1], [2, 3, 1], [0, 1, 0]).unwrap();
        assert_eq!(g.output, [2, 3, 5]);
    }

    #[test]
    fn oversized_kernel_is_config_error() {
        let err = Conv3dGeometry::new(&[1, 2, 2, 1], &[3, 3, 3, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(matches!(err, TensorError::Config { .. }));
        let err = Conv3dGeometry::new(&[4, 4, 4, 1], &[1, 1, 1, 1, 1], [0, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(matches!(err, TensorError::Config { .. }));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let err = Conv3dGeometry::new(&[4, 4, 4, 2], &[1, 1, 1, 3, 1], [1, 1, 1], [0, 0, 0]).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }
}
