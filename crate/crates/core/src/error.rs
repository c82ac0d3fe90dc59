use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller-supplied value (non-finite input, shape mismatch, too few points).
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration or hyperparameter violates a model invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file could not be parsed; `line` is 1-based.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Quantile requested at probability one for an unbounded tail.
    #[error("quantile at probability {0} is unbounded for a non-negative shape")]
    Unbounded(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("archive format error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the failure is a problem with user-supplied input or
    /// configuration rather than with the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Input(_) | Error::Config(_) | Error::Parse { .. } | Error::Unbounded(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
