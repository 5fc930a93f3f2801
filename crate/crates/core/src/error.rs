use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions or settings that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied value violates an operation precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// NaN/inf encountered in a loss or gradient.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. backpropagating through a stale tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Data content that cannot support the requested protocol.
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("episode error: {0}")]
    Episode(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
