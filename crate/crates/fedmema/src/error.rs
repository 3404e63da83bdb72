//! Error type shared across the crate.
//!
//! Every fallible path funnels into [`Error`]; the CLI maps variants onto
//! process exit codes (`Config` → 2, `NonFinite` → 3, anything else → 1).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown key, out-of-range value, malformed TOML.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement inside an op.
    #[error("shape error in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or Inf was produced. Training aborts rather than limping on.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    /// Dataset partitioning constraints violated (divisibility, empty site).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary artifact (checkpoint, anchor pack, dataset dump).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn non_finite(op: impl Into<String>) -> Self {
        Error::NonFinite { op: op.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code the CLI should terminate with for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}
