//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Strided matrix view descriptor: `rows x cols` with element `(i, j)` at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix, viewed as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Layout {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub fn with_row_stride(mut self, row_stride: usize) -> Self {
        self.row_stride = row_stride;
        self
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(a.len() >= la.span() && b.len() >= lb.span() && c.len() >= lc.span());
    // Distinct rows/cols of `c` must not alias for the write to be sound.
    assert!(lc.rows <= 1 || lc.cols <= 1 || lc.row_stride != lc.col_stride);
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    // SAFETY: the asserts above keep every access inside the slices, and `c`
    // is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transpose() {
        // a: 2x3, b^T where b is 4x3 → result 2x4
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = (0..12).map(|x| x as f64 * 0.5 - 1.0).collect();
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            &a,
            Layout::row_major(2, 3),
            &b,
            Layout::transposed(4, 3),
            0.0,
            &mut c,
            Layout::row_major(2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
