use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate anchor {0:?}: zero width or height")]
    DegenerateAnchor([f64; 4]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
