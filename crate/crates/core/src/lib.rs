//! Workbench for studying adversarial robustness of tiny quantized image
//! classifiers.
//!
//! The crate trains toy convolutional models, quantizes them post-training to
//! int8/int16 with integer inference kernels, attacks them through
//! gradient/score/decision oracles, hardens them with train-based and
//! pre-processing defenses, and measures distortion and gradient-masking
//! diagnostics.

pub mod attack;
pub mod defense;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod par;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
