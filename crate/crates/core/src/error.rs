//! Crate-wide error type with the exit-code taxonomy used by the CLI.

use thiserror::Error;

/// All recoverable failures surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad ratios, incompatible dimensions, unknown
    /// strategy names and the like. CLI exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data. CLI exit code 3.
    #[error("data error: {0}")]
    Data(String),

    /// Filesystem failure while reading or writing artifacts. Exit code 3.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A training loss became non-finite. CLI exit code 4.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Misuse of the gradient tape (e.g. non-scalar loss in backward).
    #[error("gradient error: {0}")]
    Grad(String),

    /// Evaluation failure (empty result sets, unknown checkpoints).
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Grad(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Eval(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
