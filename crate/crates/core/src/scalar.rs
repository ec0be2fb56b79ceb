//! Scalar abstraction shared by every numeric module.
//!
//! All probability algebra, losses and the MLP are written against [`Scalar`],
//! which is implemented for `f32` and `f64`. The crate root exposes `f64`
//! aliases for the common types.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type usable throughout the crate.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Tolerance used when checking that a probability vector sums to one.
    const NORM_TOL: f64;

    /// Converts an `f64` constant. Every finite `f64` is representable (with rounding).
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant is representable")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    const NORM_TOL: f64 = 1e-12;
}

impl Scalar for f32 {
    const NORM_TOL: f64 = 1e-5;
}
