//! Floating-point scalar abstraction shared by every numeric module.
//!
//! The network, losses and optimizer are written once against [`Scalar`]
//! and instantiated for `f32` (training and inference) and `f64` (gradient
//! checks and reference computations).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::tensor::gemm;

mod private {
    pub trait Sealed {}
    impl Sealed for f32 {}
    impl Sealed for f64 {}
}

/// A real scalar the tensor core can compute with.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
    + private::Sealed
{
    /// Short type name, used in diagnostics.
    const NAME: &'static str;

    /// `c (+)= a · b` with a fixed fused-multiply-add accumulation order.
    ///
    /// `a` is `m × k` with strides `(rsa, csa)`, `b` is `k × n` with strides
    /// `(rsb, csb)` and `c` is dense row-major `m × n`. Every output element is
    /// accumulated as `acc = fma(a[i][p], b[p][j], acc)` for `p = 0..k` in order,
    /// starting from `c[i][j]` when `accumulate` is set and from zero otherwise.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: gemm::MatRef<'_, Self>,
        b: gemm::MatRef<'_, Self>,
        c: &mut [Self],
        accumulate: bool,
    );

    /// Lossless-enough conversion from `f64` literals and statistics.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        ToPrimitive::to_f32(&self).expect("scalar converts to f32")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: gemm::MatRef<'_, Self>,
        b: gemm::MatRef<'_, Self>,
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm::gemm_f32(m, k, n, a, b, c, accumulate)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: gemm::MatRef<'_, Self>,
        b: gemm::MatRef<'_, Self>,
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm::gemm_f64(m, k, n, a, b, c, accumulate)
    }
}
