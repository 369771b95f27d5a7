//! CPU engine for the SSA-UNet nowcasting architecture.
//!
//! The crate provides dense NCHW tensors with hand-written forward and
//! backward kernels, the shuffled depthwise-separable convolution blocks
//! and Shuffle Attention modules that make up SSA-UNet, a training loop
//! (Adam, plateau LR schedule, early stopping), synthetic radar data,
//! the evaluation metric suite, and Grad-CAM explanations.
//!
//! All numerics are generic over [`scalar::Scalar`]: `f32` is the
//! standard precision used for training and inference, `f64` the high
//! precision used by the finite-difference gradient checker.

pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, SsaUnet};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

/// Standard-precision tensor used by training, inference and the CLI.
pub type Tensor32 = Tensor<f32>;
/// High-precision tensor used by gradient checks.
pub type Tensor64 = Tensor<f64>;
/// Standard-precision model used by training, inference and the CLI.
pub type SsaUnet32 = SsaUnet<f32>;
/// High-precision model used by end-to-end gradient checks.
pub type SsaUnet64 = SsaUnet<f64>;
