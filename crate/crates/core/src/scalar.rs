//! Floating-point scalar abstraction shared by the numeric kernel and every model.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by [`crate::Tensor2`] and the autodiff graph: `f32` or `f64`.
///
/// Dense products route through a type-specific GEMM kernel.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n` (overwritten).
    ///
    /// Strides are given in elements so transposed views can be passed without copying.
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

    /// Lossless for `f64`, rounding for `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    /// Bit pattern widened to 64 bits, used for checksums and determinism checks.
    fn bits(self) -> u64;
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
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
                if k == 0 {
                    c.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                assert!(c.len() >= m * n);
                // SAFETY: the slices cover every index reachable through the given
                // dimensions and strides (checked by the callers in `tensor.rs`), and
                // `c` is a distinct, exclusively borrowed buffer.
                unsafe {
                    $kernel(
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

            fn bits(self) -> u64 {
                self.to_bits() as u64
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);
