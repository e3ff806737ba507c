//! Scalar abstraction for the numeric kernels.
//!
//! Distance, speed, correction and fuel arithmetic is written once against
//! [`Scalar`] and instantiated for `f64` (the pipeline) and `f32` (compact
//! batch work). Aggregation over whole corpora always runs in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable by the geometry and emission kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    fn lit(value: f64) -> Self;

    /// Widens to `f64` for aggregation and output.
    fn to_f64_lossless(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn lit(value: f64) -> Self {
                value as $t
            }

            #[inline]
            fn to_f64_lossless(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
