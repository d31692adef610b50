//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the fields, problems and solver are generic over.
///
/// Implemented for `f32` and `f64` through the blanket impl; the extra
/// bounds are what the parallel field kernels and error messages need.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

/// Converts an `f64` constant (solver defaults, tolerances) into `T`.
///
/// Panics if the value is not representable, which cannot happen for the
/// finite constants used throughout this crate.
pub(crate) fn real<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("finite constant must be representable")
}
