//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], a floating-point
//! scalar backed by `num-traits`. `f64` is the default instantiation (and the
//! one the CLI and the acceptance suite run on); `f32` is available for
//! memory-constrained sweeps.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar usable throughout the core: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Shorthand for lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in Real")
    }

    /// Lossy conversion to `f64` for reporting and hashing.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Sum of a slice without requiring `Sum` on the scalar.
pub fn sum<R: Real>(values: &[R]) -> R {
    values.iter().fold(R::zero(), |acc, &v| acc + v)
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean<R: Real>(values: &[R]) -> R {
    if values.is_empty() {
        return R::zero();
    }
    sum(values) / R::from_usize(values.len()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn of_round_trips_literals() {
        assert_eq!(f64::of(2.5), 2.5);
        assert_eq!(f32::of(2.5), 2.5f32);
    }

    #[test]
    fn mean_of_empty_is_zero() {
        assert_eq!(mean::<f64>(&[]), 0.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }
}
