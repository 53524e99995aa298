use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed token line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        record: Box<crate::trainer::IterationRecord>,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::MalformedLine { .. } => "malformed_line",
            Error::EmptyCorpus => "empty_corpus",
            Error::Checkpoint(e) => e.kind(),
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
