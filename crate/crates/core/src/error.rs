use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("class {class} out of range for {n_classes} classes")]
    Category { class: usize, n_classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("config error at line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged in {stage} at step {step}")]
    Diverged { stage: &'static str, step: usize },

    #[error("missing prerequisite {artifact}; run `{producer}` first")]
    Prerequisite { artifact: PathBuf, producer: &'static str },

    #[error("stale model: {0}")]
    Staleness(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigLine { .. } => 2,
            Error::Prerequisite { .. } | Error::Staleness(_) => 3,
            Error::Diverged { .. } | Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
