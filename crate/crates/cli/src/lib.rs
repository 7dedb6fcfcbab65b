//! Commands behind the `sanet` binary, usable as a library.

pub mod commands;
pub mod config;

pub use config::{RunConfig, Scale};

use sanet_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

/// True when `SANET_DETERMINISTIC=1`.
pub fn deterministic_from_env() -> bool {
    std::env::var("SANET_DETERMINISTIC").is_ok_and(|v| v == "1")
}
