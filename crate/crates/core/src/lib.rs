//! Sparse neural networks on CPU: a small reverse-mode autodiff engine,
//! MLP/CNN models (deterministic, Bayesian, ensembles), pruning criteria and
//! schedules, FGSM attacks, and weight-sensitivity anomaly detection.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod detect;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use nn::{Model, ModelSpec};
pub use tensor::Tensor;
