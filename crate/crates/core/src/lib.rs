//! Controlled pre-training and post-training quantization laboratory.
//!
//! A byte-level GPT decoder trained under configurable optimization choices
//! (weight decay, gradient clipping, dropout, emulated half precision), then
//! quantized one-shot with vector-wise INT8 (weights and activations) or
//! column-wise INT4 (weights only) and analysed for quantization sensitivity.

pub mod diagnose;
pub mod error;
pub mod evalrun;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Parameters, QuantScheme};
pub use tensor::{emulate_half, matmul, HalfFormat, Tensor};
