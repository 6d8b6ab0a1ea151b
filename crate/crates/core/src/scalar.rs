//! Floating-point scalar abstraction.
//!
//! All numeric code in this crate is generic over [`Scalar`] so the same
//! implementation runs in `f32` (training speed) and `f64` (gradient-check
//! fidelity). Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self {
        num_traits::NumCast::from(x).expect("f64 -> Scalar cast")
    }

    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("Scalar -> f64 cast")
    }

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
