//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("non-finite value produced by op {op_id} ({op})")]
    NonFinite { op_id: usize, op: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("latent index {z} out of range 1..={num_experts}")]
    LatentIndex { z: usize, num_experts: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl Error {
    /// Process exit code contract: 1 for validation errors, 2 for
    /// runtime/numeric errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::Vocab(_)
            | Error::LatentIndex { .. }
            | Error::Config(_)
            | Error::Input(_)
            | Error::Usage(_)
            | Error::Parse(_) => 1,
            Error::NonFinite { .. } | Error::Io(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
