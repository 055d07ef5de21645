//! Low-complexity acoustic scene classification: log-mel features, a
//! depthwise-separable residual CNN with residual normalization, device
//! augmentation, teacher-logit distillation and int8 quantization.

pub mod augment;
pub mod config;
pub mod distill;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Real, Tape, Tensor, Var};
