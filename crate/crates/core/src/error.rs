use std::path::PathBuf;

use crate::objectives::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state matrix is singular; exact discretization needs an invertible A")]
    Singular,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("class {value} out of range for {classes} classes ({context})")]
    ClassRange {
        value: u32,
        classes: usize,
        context: String,
    },

    #[error("non-finite loss term `{term}` (breakdown: {breakdown:?})")]
    NumericalAbort {
        term: &'static str,
        breakdown: LossBreakdown,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
