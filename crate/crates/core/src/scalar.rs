//! Scalar abstraction shared by the numerical kernels.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar: `f32` or `f64`.
///
/// Only `RealField` supplies the arithmetic methods, so generic code never
/// hits the `abs`/`sqrt` ambiguity between `num_traits::Float` and simba.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    const INFINITY: Self;
    const NEG_INFINITY: Self;
    const EPSILON: Self;

    /// Convert an `f64` literal into this scalar.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const INFINITY: Self = <$t>::INFINITY;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;
            const EPSILON: Self = <$t>::EPSILON;

            #[inline(always)]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline(always)]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);
