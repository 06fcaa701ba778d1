//! Command-line experiment runner for federated training with the
//! activation-norm regularizer.

use thiserror::Error;

pub mod checkpoint;
pub mod commands;
pub mod config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Check(_) => 4,
            CliError::Format(_) | CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
