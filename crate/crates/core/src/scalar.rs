//! Floating-point element types accepted by [`Tensor`](crate::Tensor).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for tensor storage and arithmetic.
///
/// Implemented for `f32` (default training precision) and `f64` (gradient
/// checks). The dense matrix product is dispatched per type so each
/// precision uses its own packed kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short type name recorded in manifests.
    const NAME: &'static str;

    /// `C = A · B` for row-major operands with arbitrary strides.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` and is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_rs: isize,
        a_cs: isize,
        b: &[Self],
        b_rs: isize,
        b_cs: isize,
        c: &mut [Self],
    );

    /// Lossless conversion from `f64` literals.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $kernel:ident) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_rs: isize,
                a_cs: isize,
                b: &[Self],
                b_rs: isize,
                b_cs: isize,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output too small");
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                // SAFETY: callers pass slices covering every strided index
                // (checked by the debug assertion on the last element), and
                // `c` is a distinct `m×n` row-major buffer.
                debug_assert!(
                    ((m - 1) as isize * a_rs + (k - 1) as isize * a_cs) < a.len() as isize
                );
                debug_assert!(
                    ((k - 1) as isize * b_rs + (n - 1) as isize * b_cs) < b.len() as isize
                );
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_rs,
                        a_cs,
                        b.as_ptr(),
                        b_rs,
                        b_cs,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", sgemm);
impl_scalar!(f64, "f64", dgemm);
