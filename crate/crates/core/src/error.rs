use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{layer}`: expected {expected}, found {found}")]
    Shape {
        layer: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("gradient row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
