//! Run manifest written before a command starts and replaced on completion.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hparse_core::evaluation::REVISION;
use serde::{Deserialize, Serialize};

pub const FILE: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub revision: String,
    /// Unix seconds; omitted in deterministic mode.
    pub started: Option<u64>,
    pub finished: Option<u64>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

fn now(deterministic: bool) -> Option<u64> {
    (!deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value, seed: Option<u64>, deterministic: bool) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            revision: REVISION.to_string(),
            started: now(deterministic),
            finished: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    /// Writes `run.json` under `dir` via a temporary file and rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        fs::rename(tmp, dir.join(FILE))
    }

    pub fn complete(&mut self, dir: &Path, status: &str, deterministic: bool) -> std::io::Result<()> {
        self.status = status.to_string();
        self.finished = now(deterministic);
        self.write(dir)
    }
}
