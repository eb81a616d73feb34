use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

/// Record of an invocation, written before any computation starts.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub command: String,
    pub tool_version: &'static str,
    pub seed: Option<u64>,
    pub threads: usize,
    pub output: String,
    pub started_unix: u64,
    pub config: C,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(command: &str, seed: Option<u64>, threads: usize, output: &Path, config: C) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            output: output.display().to_string(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}
