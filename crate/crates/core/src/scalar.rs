//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar usable by the estimator, scheduler, channel and network code.
///
/// Implemented for `f32` and `f64`. Elementary functions (`sqrt`, `cos`, ...)
/// come from [`RealField`]; conversions go through `num-traits`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default {
    /// Converts an `f64` literal, rounding to the target precision.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    #[inline]
    fn is_finite_real(self) -> bool {
        self.f64().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}
