//! Scalar abstraction for the continuous parts of the cost and communication models.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the interpolating profiler and the closed-form
/// shard optimizer. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn of_u64(v: u64) -> Self {
        Self::from_u64(v).expect("u64 is representable in every float type")
    }

    fn of_u128(v: u128) -> Self {
        Self::from_u128(v).expect("u128 is representable in every float type")
    }

    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
