//! Scalar abstraction the numeric core is generic over.

use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar for tensors, tapes, models and objectives.
///
/// Everything downstream (training, metrics, the CLI) instantiates this at
/// `f64`; `f32` is supported for callers that want the smaller footprint.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used to bring configuration constants
    /// (epsilons, learning rates, colors) into the working precision.
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 converts to any Scalar")
    }

    /// Widening (for `f32`/`f64`: exact) conversion used on output paths.
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
