//! Neighborhood-attention transformer for multi-lead ECG classification:
//! a small reverse-mode autodiff engine, the 1D neighborhood-attention
//! kernel, masked-autoencoder pretraining, dual-loss fine-tuning,
//! signal preprocessing and evaluation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod natten;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use model::{count_params, EcgNat, ModelConfig, ParamCount};
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
