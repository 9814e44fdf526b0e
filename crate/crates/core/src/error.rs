use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Enumeration would exceed the supported response-space size.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("non-finite gradient at iteration {iteration}, update {update}: {detail}")]
    NonFiniteGradient {
        iteration: usize,
        update: usize,
        detail: String,
    },

    /// An ordering check was requested on an instance whose per-region
    /// contributions are not sign-aligned.
    #[error("misaligned instance: {0}")]
    Misaligned(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
