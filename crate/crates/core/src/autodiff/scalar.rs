use ndarray::LinalgScalar;
use num_traits::{Float, NumAssign};

/// Element type the tape can differentiate. Training runs in `f32` (checkpoints
/// store little-endian f32 payloads, so this keeps round-trips bitwise);
/// finite-difference tests instantiate the same code with `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
