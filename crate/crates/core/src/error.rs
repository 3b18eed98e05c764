//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents incompatible with an operation. Reports both sides.
    #[error("{op}: dimension mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Invalid scalar argument (dropout rate, kernel sigma, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Inconsistent model/experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data (labels, probability rows, raw patches).
    #[error("invalid data: {0}")]
    Data(String),

    /// Operation called in a state that does not support it.
    #[error("invalid state: {0}")]
    State(String),

    /// A forward or backward pass produced NaN/Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Batchnorm asked to normalize a single element per channel.
    #[error("batchnorm: degenerate variance, need at least 2 elements per channel, got {0}")]
    DegenerateVariance(usize),

    /// Training loss became NaN.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    /// Metric undefined for the given matrix (zero total, empty subset).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Stored dataset fails checksum verification.
    #[error("dataset corruption: {0}")]
    Corruption(String),

    /// Stored dataset or checkpoint has a malformed layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
