//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A computation produced or would produce non-finite values, or an
    /// iterative kernel failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An argument violates its documented range.
    #[error("argument error: {0}")]
    Argument(String),

    /// A caller-supplied pair of values violates a cross-value contract
    /// (e.g. a claimed subgradient outside the dual ball).
    #[error("contract error: {0}")]
    Contract(String),

    /// A network rewrite would change shapes in a way the topology cannot
    /// absorb.
    #[error("structural error: {0}")]
    Structural(String),

    /// Malformed input data (IDX files, logs, checkpoints).
    #[error("format error: {0}")]
    Format(String),

    /// A referenced artifact (checkpoint, run directory, config file) is
    /// missing.
    #[error("not found: {0}")]
    NotFound(String),

    /// Bad configuration or usage.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::NotFound(_) => 1,
            Error::Format(_) | Error::Io(_) | Error::Dimension(_) | Error::Structural(_)
            | Error::Contract(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
