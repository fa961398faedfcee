//! Workbench for dual-stream transformer language models.
//!
//! The crate is organized as a pipeline. [`tensor`] provides a small
//! fixed-architecture reverse-mode autodiff engine. [`model`] builds the
//! dual-stream gated-attention transformer on top of it, [`train`] fits the
//! model pair (per-layer supervised and final-loss control) with AdamW, and
//! [`trace`] captures per-prediction records from a trained checkpoint.
//! [`features`] turns traces into fixed-layout feature vectors, [`cluster`]
//! groups those vectors (k-means, HDBSCAN, PCA, ARI), and [`causal`] measures
//! head-level ablation and steering effects on task suites.
//!
//! Everything is deterministic: seeded RNGs, single-threaded kernels, and
//! fixed iteration orders, so identical configs reproduce identical bytes.

pub mod causal;
pub mod cluster;
pub mod features;
pub mod model;
pub mod tensor;
pub mod trace;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a kernel or graph op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-range input data (corpus, suite, label file).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary artifact (checkpoint, trace, or feature file).
    #[error("format error: {0}")]
    Format(String),

    /// Backward pass requested twice without resetting accumulated gradients.
    #[error("reverse accumulation already ran on this graph; reset first")]
    BackwardAlreadyRan,

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    /// Underlying I/O failure. Display carries the io message itself, so
    /// the variant deliberately has no source() for chain printers to repeat.
    #[error("io error: {0}")]
    Io(std::io::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
