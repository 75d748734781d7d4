//! Scalar abstraction so the math stack runs in f32 for training and f64 for
//! gradient checking.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type accepted by graphs, parameters, and kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Shorthand for converting an `f64` constant, panicking only for
    /// values outside the type's range (never the case for literals used here).
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant out of range")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
