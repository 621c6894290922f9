//! Metric-learning toolkit built around batch-level feature erasing.
//!
//! The crate provides a small reverse-mode autodiff engine (`tensor`), the
//! structured-erasing masks (`masks`), a two-branch embedding model
//! (`model`), batch-hard losses (`losses`), synthetic data plus identity
//! sampling (`data`), retrieval evaluation (`eval`), and the training loop
//! with its optimizer and schedule (`train`).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod losses;
pub mod masks;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{batch_norm, BnMode, Reduce, RunningStats, Tensor};
