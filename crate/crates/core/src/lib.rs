//! Exemplar-free class-incremental learning with self-sustaining
//! representation expansion.
//!
//! Each incremental phase widens every convolution block of a frozen
//! extractor with a zero-initialized residual adapter, trains the adapters
//! against a feature-distillation teacher (the previous phase's network)
//! with per-sample routing by prototype similarity, then folds the adapters
//! back into the main kernels so the architecture never grows.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod protomem;
pub mod reparam;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
