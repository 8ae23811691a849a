use std::fmt::{Debug, Display};

/// Element type of tensors: a real float with the conversions the math
/// code needs. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64, used for constants and RNG draws.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion to f64 for I/O and statistics.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Gauss error function, evaluated in f64 precision.
    fn erf(self) -> Self {
        Self::from_f64_lossy(libm::erf(self.to_f64_lossy()))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
