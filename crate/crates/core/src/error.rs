use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index ({row}, {col}) out of range for a {rows}x{cols} grid")]
    Index { row: usize, col: usize, rows: usize, cols: usize },
    #[error("input error: {0}")]
    Input(String),
    #[error("no overlap at key ({0}, {1})")]
    NoOverlapAtKey(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid targets: {0}")]
    Targets(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("batch normalization needs at least two rows in training mode, got {0}")]
    BatchTooSmall(usize),
    /// Training produced a non-finite value. The seed and step reproduce
    /// every random draw of the failing iteration.
    #[error("non-finite {detail} at step {step} (seed {seed}, batch ids {batch:?})")]
    NonFinite { step: u64, seed: u64, batch: Vec<usize>, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;
