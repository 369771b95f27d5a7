use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar element type of all tensors.
///
/// Everything numeric in this crate is generic over `Scalar` so the same
/// kernels run in standard precision (`f32`, used for training and
/// inference) and in high precision (`f64`, used by the finite-difference
/// gradient checker).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening to `f64` for reductions and reporting.
    fn to_f64_lossy(self) -> f64;

    /// Conversion from an `f64` literal or intermediate.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
