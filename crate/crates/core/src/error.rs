use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by the sparse factorization layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SparseError {
    #[error("matrix is not square: {nrows} x {ncols}")]
    NotSquare { nrows: usize, ncols: usize },
    #[error("malformed compressed column structure: {0}")]
    Malformed(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not positive definite: pivot {index} is {pivot:e} (largest pivot {max_pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64, max_pivot: f64 },
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("row {row}: {message}")]
    Data { row: usize, message: String },
    #[error("data: {0}")]
    Dataset(String),
    #[error("model specification [{section}]: {message}")]
    Spec { section: String, message: String },
    #[error("spline: {0}")]
    Spline(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("non-differentiable point: {0}")]
    NonDifferentiable(String),
    #[error("inner optimization failed: {0}")]
    Inner(String),
    #[error("log-likelihood cannot be evaluated at the initial parameter vector {params:?}: {reason}")]
    NonFiniteStart { params: Vec<f64>, reason: String },
    #[error("outer optimization failed: {0}")]
    Outer(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fit failure: {0}")]
    FitFailure(String),
    #[error("incompatible fits: {0}")]
    Incompatible(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn spec(section: &str, message: impl Into<String>) -> Self {
        Error::Spec {
            section: section.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
