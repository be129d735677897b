use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Element type of tensors: 32-bit for training, 64-bit for gradient checking.
pub trait Scalar:
    Float + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
