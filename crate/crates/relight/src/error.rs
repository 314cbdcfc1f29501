//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement; `axis` names the offending dimension.
    #[error("dimension error on {axis}: {detail}")]
    Dim { axis: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    /// API misuse (backward twice, missing gradients, step out of range, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or a failed numeric gate.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint magic mismatch: found {found:?}, expected \"RXMB\"")]
    CheckpointMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { axis, detail: detail.into() }
    }

    /// Process exit code for the CLI contract: 1 usage, 2 i/o, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim { .. } | Error::Config(_) | Error::Usage(_) => 1,
            Error::Io(_)
            | Error::Image(_)
            | Error::CheckpointMagic { .. }
            | Error::CheckpointVersion(_)
            | Error::Checkpoint(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
