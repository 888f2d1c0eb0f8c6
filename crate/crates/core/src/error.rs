use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Variants map onto the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input (bad node index, negative weight, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value or a solver that did not converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API used out of its contract (non-scalar loss, k out of range, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// Unreadable or inconsistent data files.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("training diverged at step {step} (lr={lr}, beta_1={beta_1}, beta_end={beta_end}): loss={loss}")]
    Divergence {
        step: usize,
        lr: f64,
        beta_1: f64,
        beta_end: f64,
        loss: f64,
    },

    #[error("node count mismatch: checkpoint has {checkpoint} nodes, graph has {graph}")]
    NodeMismatch { checkpoint: usize, graph: usize },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    /// A verification command (gradient check) that ran but did not pass.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the `specstg` binary.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 1 | other failure (usage, i/o, internal) |
    /// | 2 | configuration error |
    /// | 3 | data error |
    /// | 4 | numeric divergence |
    /// | 5 | checkpoint / graph node mismatch |
    /// | 6 | misaligned forecast and truth files |
    /// | 7 | gradient check failed |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Format { .. } | Error::Input(_) | Error::Csv(_) => 3,
            Error::Divergence { .. } | Error::Numeric(_) => 4,
            Error::NodeMismatch { .. } => 5,
            Error::Misaligned(_) => 6,
            Error::CheckFailed(_) => 7,
            Error::Shape(_) | Error::Usage(_) | Error::Io { .. } => 1,
        }
    }
}
