use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic header: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimensions must be positive (got {width}x{height}x{channels})")]
    NonPositiveDims {
        width: i64,
        height: i64,
        channels: i64,
    },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png encoding failed: {0}")]
    Image(String),

    #[error("{name} must be positive (got {value})")]
    NonPositive { name: &'static str, value: f64 },

    #[error("{what} out of range [0, 1] at index {index}: {value}")]
    OutOfUnitRange {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("checkpoint store does not match the inputs: {0}")]
    StoreMismatch(String),

    #[error("iteration budget must be at least one")]
    IterBudgetZero,

    #[error("displacement range must be at least one")]
    NonPositiveRange,

    #[error("probability lookup out of range: {0}")]
    ProbOutOfRange(String),

    #[error("grid {width}x{height} too small to downsample")]
    DimTooSmall { width: usize, height: usize },

    #[error("pyramid level {level} would be empty")]
    EmptyLevel { level: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
