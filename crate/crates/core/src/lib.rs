//! revsum: sentiment classification over paired review/summary texts.
//!
//! The crate builds everything from a small gradient-checked tensor core:
//! BiLSTM sequence encoders, four attention mechanisms, a zoo of model
//! variants that combine review and summary inputs, Adam training with early
//! stopping, corpus / embedding loaders, a synthetic corpus generator, and
//! the analysis tooling (conflicting-set decomposition, length buckets,
//! attention heatmaps) behind the `revsum` CLI.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, ModelVariant};
pub use tape::Tape;
pub use tensor::Tensor;
