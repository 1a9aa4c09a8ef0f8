use std::fmt::{Debug, Display};

use num_traits::Float;

use super::{AnyTensor, DType, Tensor};

/// Element type of a [`super::Tensor`]: `f32` for inference, `f64` for
/// gradient verification.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn wrap(t: Tensor<Self>) -> AnyTensor;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn wrap(t: Tensor<Self>) -> AnyTensor {
        AnyTensor::F32(t)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn wrap(t: Tensor<Self>) -> AnyTensor {
        AnyTensor::F64(t)
    }
}
