//! Bounds-checked matrix product over strided views, backed by
//! `matrixmultiply`. Single-threaded, so results do not depend on the
//! thread pool.

use crate::tensor::Element;

/// A `rows x cols` view into a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub const fn row_major(rows: usize, cols: usize) -> Self {
        MatView { rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub const fn t(self) -> Self {
        MatView { rows: self.cols, cols: self.rows, row_stride: self.col_stride, col_stride: self.row_stride }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = alpha * a b + beta * c`. With `beta == 0` the old contents of `c`
/// are ignored.
///
/// # Panics
/// On inner-dimension mismatch or a view that overruns its buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(alpha: T, a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimensions");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "gemm output dimensions");
    assert!(av.span() <= a.len() && bv.span() <= b.len() && cv.span() <= c.len(), "gemm view out of bounds");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for r in 0..cv.rows {
            for col in 0..cv.cols {
                let d = &mut c[r * cv.row_stride + col * cv.col_stride];
                *d = if beta == T::zero() { T::zero() } else { beta * *d };
            }
        }
        return;
    }
    // SAFETY: the spans checked above bound every addressed element, and
    // `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
