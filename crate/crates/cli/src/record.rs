//! Append-only JSONL run records.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
    pub metrics: Option<Value>,
    pub status: String,
    pub exit_code: i32,
}

/// Collects record fields while a command runs.
#[derive(Debug)]
pub struct RecordBuilder {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub started_at: String,
    pub outputs: Vec<PathBuf>,
    pub metrics: Option<Value>,
    /// Where the record goes; commands set a default from their output path.
    pub path: Option<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RecordBuilder {
    pub fn new(command: &str, path: Option<PathBuf>) -> Self {
        RecordBuilder {
            command: command.to_string(),
            config: Value::Null,
            seed: None,
            started_at: now(),
            outputs: Vec::new(),
            metrics: None,
            path,
        }
    }

    pub fn default_path(&mut self, dir: &Path) {
        if self.path.is_none() {
            self.path = Some(dir.join("runs.jsonl"));
        }
    }

    pub fn finish(self, exit_code: i32) -> Option<(PathBuf, RunRecord)> {
        let path = self.path?;
        Some((
            path,
            RunRecord {
                command: self.command,
                config: self.config,
                seed: self.seed,
                started_at: self.started_at,
                finished_at: now(),
                outputs: self.outputs,
                metrics: self.metrics,
                status: if exit_code == 0 { "ok".into() } else { "error".into() },
                exit_code,
            },
        ))
    }
}

pub fn append(path: &Path, record: &RunRecord) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record).map_err(std::io::Error::other)?)
}

pub fn read_all(path: &Path) -> Result<Vec<RunRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
        .collect()
}
