use std::path::PathBuf;

use thiserror::Error;

/// Row and column numbers in data errors are 1-based.
#[derive(Debug, Error)]
pub enum FadError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("bad binary matrix file: {0}")]
    BadBinary(String),

    #[error("column {col} has zero variance")]
    ConstantColumn { col: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective returned NaN at psi = {psi:?}")]
    NanObjective { psi: Vec<f64> },

    #[error("partial SVD did not converge after {restarts} restarts (max residual {max_residual:e})")]
    SvdNotConverged { restarts: usize, max_residual: f64 },

    #[error("singular {dim}x{dim} system in {context}")]
    Singular { dim: usize, context: &'static str },

    #[error("every fit in the sweep failed: {0}")]
    AllFitsFailed(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FadError>;

impl FadError {
    /// Failures of the numerical routines, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FadError::NanObjective { .. }
                | FadError::SvdNotConverged { .. }
                | FadError::Singular { .. }
                | FadError::AllFitsFailed(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FadError::Io {
            path: path.into(),
            source,
        }
    }
}
