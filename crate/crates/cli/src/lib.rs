//! Command-line front end: configuration, commands and output tables.

pub mod commands;
pub mod config;
pub mod output;

use std::fmt;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input files (exit code 2).
    Config(String),
    /// Numerical failure while running (exit code 3).
    Numerical(String),
    /// Could not write outputs (exit code 1).
    Io(String),
}

impl CliError {
    pub fn io(e: impl fmt::Display) -> Self {
        CliError::Io(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<covtune::Error> for CliError {
    fn from(e: covtune::Error) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else if matches!(e, covtune::Error::Io(_) | covtune::Error::Csv(_)) {
            CliError::Io(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}
