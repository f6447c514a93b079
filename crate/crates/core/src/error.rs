use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// A caller violated an operation's precondition (shape, support, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no entity could be linked in question {0:?}")]
    Linking(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error(
        "hop {hop}: retrieval and expansion supports do not intersect \
         ({retrieved} retrieved, {expanded} expanded)"
    )]
    EmptyResult {
        hop: usize,
        retrieved: usize,
        expanded: usize,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
