//! Focal-point zoom pyramids and the training pipeline built around them.

pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod net;
pub mod ops;
pub mod pyramid;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit tensor: the concrete type the training pipeline runs on.
pub type Tensor32 = tensor::Tensor<f32>;
/// 64-bit tensor, used where the finite-difference oracle needs headroom.
pub type Tensor64 = tensor::Tensor<f64>;
