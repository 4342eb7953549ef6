//! CLI error type with the repo-wide exit-code contract:
//! 0 ok, 1 check failure, 2 config, 3 IO/shape, 4 numeric divergence.

use std::fmt;

use mcvit_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration.
    Config(String),
    /// Filesystem or tensor-format problems.
    Io(String),
    /// A verification command found a failure (e.g. gradcheck).
    CheckFailed(String),
    /// Training produced a non-finite loss.
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Diverged(m) => write!(f, "numeric divergence: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::InvalidConfig { .. } => CliError::Config(err.to_string()),
            CoreError::Diverged { .. } | CoreError::NonFinite { .. } => {
                CliError::Diverged(err.to_string())
            }
            _ => CliError::Io(err.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Config(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
