use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
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
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// `c += a · b` for an `m×k` by `k×n` product over strided row-major views.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: View<'_, Self>,
        b: View<'_, Self>,
        c: &mut [Self],
        rsc: usize,
    );
}

/// Read-only matrix view: data with row and column strides.
#[derive(Clone, Copy)]
pub struct View<'a, S> {
    pub data: &'a [S],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    pub fn rows(data: &'a [S], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [S], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

fn check<S>(m: usize, k: usize, n: usize, a: &View<'_, S>, b: &View<'_, S>, c: &[S], rsc: usize) {
    assert!(
        a.covers(m, k) && b.covers(k, n),
        "gemm operand out of bounds"
    );
    assert!(
        m == 0 || n == 0 || (m - 1) * rsc + n <= c.len(),
        "gemm output out of bounds"
    );
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: View<'_, f32>,
        b: View<'_, f32>,
        c: &mut [f32],
        rsc: usize,
    ) {
        check(m, k, n, &a, &b, c, rsc);
        // SAFETY: bounds of every operand checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                1.0,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: View<'_, f64>,
        b: View<'_, f64>,
        c: &mut [f64],
        rsc: usize,
    ) {
        check(m, k, n, &a, &b, c, rsc);
        // SAFETY: bounds of every operand checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                1.0,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            );
        }
    }
}
