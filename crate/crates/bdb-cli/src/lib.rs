//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps, and activation export. All verbs are deterministic
//! given a seed; reruns produce byte-identical artifacts.

pub mod commands;
pub mod config;

use std::fmt;

/// Exit discipline: usage and configuration mistakes exit 2, runtime
/// failures exit 1. Clap handles its own parse errors (also exit 2).
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, impossible request.
    Config(String),
    /// I/O failures, training divergence, malformed data files.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "error: {}", msg),
            CliError::Runtime(msg) => write!(f, "error: {}", msg),
        }
    }
}

impl From<bdb_core::Error> for CliError {
    fn from(e: bdb_core::Error) -> Self {
        if e.is_config_like() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
