//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// A softmax row had every entry masked out.
    #[error("degenerate mask: row {row} has no allowed entries")]
    DegenerateMask { row: usize },

    /// An operation produced (or was handed) a non-finite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Tape misuse: backward re-run or recording after backward.
    #[error("tape misuse: {0}")]
    Tape(String),

    /// Positional encoding capacity exceeded.
    #[error("position {t} exceeds positional table capacity {t_max}")]
    Capacity { t: usize, t_max: usize },

    /// Token id outside the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {size}")]
    VocabRange { id: usize, size: usize },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a precondition (empty corpus, bad labels, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Early fusion requires frame-synchronous channels.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// Batch-norm training needs at least two rows.
    #[error("batch norm requires at least 2 rows in train mode, got {rows}")]
    BatchSize { rows: usize },

    /// A file's size or content does not match its declared shape.
    #[error("corrupt file {path}: {details}")]
    Corrupt { path: String, details: String },

    /// Malformed manifest line.
    #[error("manifest {path}:{line}: {details}")]
    Manifest {
        path: String,
        line: usize,
        details: String,
    },

    /// Training aborted on a non-finite loss.
    #[error("numeric failure at step {step}: {details}")]
    Numeric { step: usize, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Checkpoint file is not in the expected format.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
