//! Scalar abstraction for the numeric core.
//!
//! All of the math (tensors, the autodiff tape, similarity, metrics, Adam)
//! is generic over [`Real`]; the training stack and CLI instantiate it at
//! `f64` through the aliases at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar usable throughout the numeric core.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64` literals (hyperparameters, guards).
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Denominators smaller than this raise a numeric error instead of
/// silently producing infinities.
pub const DIV_GUARD: f64 = 1e-12;
