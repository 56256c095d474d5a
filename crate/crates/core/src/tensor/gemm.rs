// Bounds-checked entry points into the `matrixmultiply` kernels.

fn extent(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize + 1
}

macro_rules! gemm_impl {
    ($name:ident, $ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(crate) fn $name(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            a_strides: (isize, isize),
            b: &[$ty],
            b_strides: (isize, isize),
            beta: $ty,
            c: &mut [$ty],
        ) {
            assert!(extent(m, k, a_strides) <= a.len(), "lhs out of bounds");
            assert!(extent(k, n, b_strides) <= b.len(), "rhs out of bounds");
            assert!(m * n <= c.len(), "output out of bounds");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: the asserts above bound every element the kernel touches
            // for the given dimensions and strides; `c` is row-major m x n.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    a_strides.0,
                    a_strides.1,
                    b.as_ptr(),
                    b_strides.0,
                    b_strides.1,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

gemm_impl!(sgemm, f32, matrixmultiply::sgemm);
gemm_impl!(dgemm, f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        dgemm(2, 2, 2, &a, (2, 1), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T b
        dgemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // accumulate
        dgemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 1.0, &mut c);
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }
}
