//! Core library: tensor/autodiff engine, signal front-end, the
//! time-frequency motif tokenizer, the downstream token transformer,
//! token-quality analytics, data handling, and on-disk formats.

pub mod analytics;
pub mod autograd;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod nn;
pub mod optim;
pub mod signal;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::{Scalar, Tensor};
