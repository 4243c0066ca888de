//! Scalar abstraction shared by every solver and operator.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the grids and solvers are generic over.
///
/// `f64` gives the all-double path. `f32` gives the single-precision
/// iterate path; gradient accumulators stay in `f64` in both cases.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    /// Widening (or identity) conversion to `f64`.
    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
