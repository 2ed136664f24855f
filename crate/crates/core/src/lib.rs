//! Concept bottleneck models whose concept importance is aligned with an
//! expert-supplied `{High, Mid, Low}` importance matrix.
//!
//! The pipeline is features → concept probabilities → class probabilities.
//! Concept importance is measured by zero-filling one concept's probability
//! segment and recording how far each class probability moves (`ΔY`). Training
//! adds L1 terms that push `ΔY` toward 1 on High cells and toward 0 on Low
//! cells.
//!
//! Modules, bottom up:
//! - [`autodiff`]: reverse-mode tape over dense `f64` tensors
//! - [`nn`]: dense layers, label-smoothed cross-entropy, AdamW
//! - [`cbm`]: concept scheme, model, concept removal, persistence
//! - [`knowledge`]: importance matrices and the shuffled-matrix control
//! - [`align`]: `ΔY`, alignment losses, total loss
//! - [`data`]: CSV datasets, synthetic domain-shift generator, batching
//! - [`eval`]: macro F1, confidence intervals, `ΔY` heatmaps
//! - [`trainer`]: seeded training loop with validation model selection
//! - [`cli`]: the `kgcbm` command-line tool

pub mod align;
pub mod autodiff;
pub mod cbm;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
mod io;
pub mod knowledge;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

/// Version stamped into every JSON and CSV artifact.
pub const FORMAT_VERSION: u32 = 1;
