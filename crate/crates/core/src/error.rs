use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, bad range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric quantity left the valid domain (NaN/inf where finite required).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Scene generation cannot satisfy the requested configuration.
    #[error("generation error: {0}")]
    Generation(String),

    /// Dataset or checkpoint I/O failed.
    #[error("io error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },

    /// Configuration file problems; names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint refused: version or integrity mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (non-finite loss); carries the last good checkpoint if any.
    #[error("training aborted at step {step}: {msg} (last good checkpoint: {last_checkpoint:?})")]
    TrainingAborted {
        step: usize,
        msg: String,
        last_checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}
