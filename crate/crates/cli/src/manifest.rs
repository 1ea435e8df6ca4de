use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// Record of one run, written last so its presence means the run finished.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub git_describe: String,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

/// Collects output files under one directory and times the run.
pub struct RunDir {
    dir: PathBuf,
    command: String,
    config: serde_json::Value,
    outputs: Vec<String>,
    started: Instant,
    started_unix_s: u64,
}

impl RunDir {
    pub fn create<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text)
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            git_describe: git_describe(),
            started_unix_s: self.started_unix_s,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            config: self.config,
            outputs: self.outputs,
        };
        let p = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m)? + "\n";
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(m)
    }
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
