use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;

/// One manifest per command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str, config_hash: &str, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started: now(),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: &Path) {
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.finished = now();
        let path = out_dir.join(format!("manifest-{}.json", self.command));
        let body = serde_json::to_vec_pretty(&self)?;
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
