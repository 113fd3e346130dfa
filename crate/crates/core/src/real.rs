use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors and the autodiff graph.
///
/// Training runs in `f32`; gradient checks run in `f64`.
///
/// Transcendental functions go through the pure-Rust `libm` rather than
/// `Float`, whose backend depends on which `num-traits` features the build
/// happens to unify (the platform C library when `std` is on). Routing them
/// here keeps results bit-identical across builds and machines.
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
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;

    fn libm_exp(self) -> Self;

    fn libm_ln(self) -> Self;

    fn libm_powf(self, e: Self) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "F32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn libm_exp(self) -> Self {
        libm::expf(self)
    }

    #[inline]
    fn libm_ln(self) -> Self {
        libm::logf(self)
    }

    #[inline]
    fn libm_powf(self, e: Self) -> Self {
        libm::powf(self, e)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "F64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    #[inline]
    fn libm_exp(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn libm_ln(self) -> Self {
        libm::log(self)
    }

    #[inline]
    fn libm_powf(self, e: Self) -> Self {
        libm::pow(self, e)
    }
}
