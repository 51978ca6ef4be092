//! Floating-point element types accepted by the tensor core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Element type of tensors and parameters: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into this type.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `C = alpha * A·B + beta * C` for row-major operands described by
    /// `(rows, cols, row_stride, col_stride)`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self], c_row_stride: usize);
}

/// Borrowed strided matrix operand for [`Scalar::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major matrix with `cols` columns.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef { data, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, row_stride: 1, col_stride: cols }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

macro_rules! checked_gemm {
    ($f:path, $m:ident, $k:ident, $n:ident, $alpha:ident, $a:ident, $b:ident, $beta:ident, $c:ident, $rsc:ident) => {{
        assert!($a.covers($m, $k) && $b.covers($k, $n), "gemm operand out of bounds");
        assert!($m == 0 || $n == 0 || ($m - 1) * $rsc + $n <= $c.len(), "gemm output out of bounds");
        // SAFETY: the assertions above bound every index the kernel touches.
        unsafe {
            $f(
                $m, $k, $n, $alpha,
                $a.data.as_ptr(), $a.row_stride as isize, $a.col_stride as isize,
                $b.data.as_ptr(), $b.row_stride as isize, $b.col_stride as isize,
                $beta, $c.as_mut_ptr(), $rsc as isize, 1,
            )
        }
    }};
}

impl Scalar for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self], rsc: usize) {
        checked_gemm!(matrixmultiply::sgemm, m, k, n, alpha, a, b, beta, c, rsc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self], rsc: usize) {
        checked_gemm!(matrixmultiply::dgemm, m, k, n, alpha, a, b, beta, c, rsc)
    }
}
