use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes of the
/// pipeline: malformed input data, violated preconditions, numerical
/// domain problems and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Rows out of chronological order or duplicated timestamps.
    #[error("ordering error at line {line}: {msg}")]
    Ordering { line: usize, msg: String },

    /// A numeric argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A length/shape precondition does not hold.
    #[error("sizing error: {0}")]
    Sizing(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// An internal contract between pipeline stages was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint file missing, corrupt or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
