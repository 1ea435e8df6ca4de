//! Command-line front end: dataset generation, toy training, circuit
//! discovery (EAP, EP, HAP), evaluation, the exhaustive oracle, and graph
//! export. Every run writes a `manifest.json` next to its outputs.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

pub use args::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or missing configuration; nothing was computed.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] hap_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration errors (including invalid module configs), 1
    /// for everything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(hap_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// Parse `argv` and run the chosen subcommand.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
