//! Scalar abstraction so every numeric path runs in f32 (training,
//! inference) or f64 (gradient checks, adjointness oracles) without
//! duplicated code.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element type for all tensors in the crate.
///
/// f32 is the production dtype; f64 exists for test oracles that need
/// finite-difference headroom. All random draws happen in f64 and are
/// converted, so seeded runs produce the same values for both dtypes.
pub trait Elem:
    LinalgScalar
    + Float
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
