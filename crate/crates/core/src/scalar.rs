//! Scalar abstraction shared by every numeric module.
//!
//! The filter, fuzzy system and trainer are written against [`Real`] so they
//! run unchanged in `f32` or `f64`. Simulation and file I/O use `f64` through
//! the aliases at the crate root.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar usable by the estimator: `f32` or `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    nalgebra::convert(v)
}

/// Lossy conversion back to `f64`, used for reporting.
#[inline]
pub fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
