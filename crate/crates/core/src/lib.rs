//! Latent chain-of-thought recurrence for structured-data transformers.
//!
//! After a first pass, the hidden states at the prediction positions are
//! compressed into feedback tokens, appended to the input, and the same
//! stack is re-run; predictions are decoded from the original positions.
//! The crate contains a small reverse-mode autodiff engine, the attention
//! stack (plain, deeper and weight-tied looped variants), three model
//! families (patch forecaster, three-stage tabular ICL, PFN row layout),
//! the training loop, and the benchmark harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`).

pub mod autodiff;
pub mod cot;
pub mod data;
mod error;
pub mod harness;
pub mod nn;
pub mod pfn;
mod scalar;
pub mod tabular;
pub mod train;
pub mod ts;

pub use error::{Error, Result};
pub use scalar::{lit, Scalar};

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
