//! Dense row-major kernels used by the forward and backward passes.

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with
    /// `stride` columns.
    pub fn cols(data: &'a [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        Self::strided(data, col0, rows, cols, stride, 1)
    }

    pub fn strided(
        data: &'a [f64],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "matrix view out of bounds");
        }
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// A strided mutable matrix view.
pub(crate) struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::cols(data, rows, cols, 0, cols)
    }

    pub fn cols(data: &'a mut [f64], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(col0 + (rows - 1) * stride + cols - 1 < data.len());
        }
        Self {
            data,
            offset: col0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply handles k = 0, but keep beta semantics explicit.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let v = &mut c.data[c.offset + r * c.rs + col * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked at construction, so all
    // addressed elements lie inside the borrowed slices; `c` is a unique
    // borrow and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            c.rows,
            a.cols,
            c.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
/// `a (m x k) * b (k x n)` into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(1.0, View::new(a, m, k), View::new(b, k, n), 0.0, ViewMut::new(&mut c, m, n));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let got = matmul(&a, &b, 3, 4, 5);
        let want = naive(&a, &b, 3, 4, 5);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_and_column_views() {
        // a is 4x3 stored; use a^T (3x4) times b (4x2).
        let a: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..8).map(|v| 1.0 + v as f64).collect();
        let mut c = vec![1.0; 6];
        gemm(
            1.0,
            View::new(&a, 4, 3).t(),
            View::new(&b, 4, 2),
            1.0,
            ViewMut::new(&mut c, 3, 2),
        );
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a[i * 3 + j];
            }
        }
        let want: Vec<f64> = naive(&at, &b, 3, 4, 2).iter().map(|v| v + 1.0).collect();
        assert_eq!(c, want);

        // Column block 1..3 of a 4x3 matrix.
        let block = View::cols(&a, 4, 3, 1, 2);
        let mut out = vec![0.0; 4];
        let ones = [1.0, 1.0];
        gemm(1.0, block, View::new(&ones, 2, 1), 0.0, ViewMut::new(&mut out, 4, 1));
        assert_eq!(out, vec![3.0, 9.0, 15.0, 21.0]);
    }
}
