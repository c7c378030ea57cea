use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the deterministic core is written against: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// Newton residual tolerance that is reachable at this precision.
    fn residual_tol() -> Self;
}

impl Scalar for f32 {
    fn residual_tol() -> Self {
        2e-4
    }
}

impl Scalar for f64 {
    fn residual_tol() -> Self {
        1e-10
    }
}
