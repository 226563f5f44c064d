//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the library is generic over (`f32` or `f64`).
///
/// Everything is written against [`RealField`] for the elementary functions and
/// against `num-traits` for conversions. Text formats rely on `Display` being the
/// shortest round-tripping representation, which holds for both float types.
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Display
    + Debug
    + FromStr
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// `max(requested, 64 ulp)`: keeps fixed f64 tolerances meaningful in f32.
    #[inline]
    fn tol(requested: f64) -> Self {
        let eps = Self::default_epsilon().as_f64();
        Self::lit(requested.max(64.0 * eps))
    }
}

impl Real for f32 {}
impl Real for f64 {}
