use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("ingestion error at {key}: {reason}")]
    Ingestion { key: String, reason: String },

    #[error("singular step: {0}")]
    Singularity(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Singularity(_) => 3,
            _ => 2,
        }
    }
}
