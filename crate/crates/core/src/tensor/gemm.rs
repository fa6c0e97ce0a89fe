use super::Element;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub(crate) fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is a contiguous row-major
/// `a.rows x b.cols` matrix. With `beta == 0` the old contents of `c` are
/// never read.
pub(crate) fn gemm<T: Element>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: both views were bounds-checked at construction for their full
    // row-major extent and `t` only swaps strides, so every index reached
    // by (rows, cols, rs, cs) lies inside the slice. `c` holds m*n values.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_triple_loop_with_transposes() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; 15];
        gemm(1.0, MatRef::row_major(&a, 3, 4), MatRef::row_major(&b, 4, 5), 0.0, &mut c);
        let want = naive(&a, &b, 3, 4, 5);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T stored as 4x3, b^T stored as 5x4.
        let at: Vec<f64> = (0..12).map(|idx| a[(idx % 3) * 4 + idx / 3]).collect();
        let bt: Vec<f64> = (0..20).map(|idx| b[(idx % 4) * 5 + idx / 4]).collect();
        let mut c2 = vec![0.0; 15];
        gemm(
            1.0,
            MatRef::row_major(&at, 4, 3).t(),
            MatRef::row_major(&bt, 5, 4).t(),
            0.0,
            &mut c2,
        );
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
