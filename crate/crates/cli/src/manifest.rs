use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

pub const FILE: &str = "run_manifest.json";

/// Provenance record written once per run into its output directory.
#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<&'static str, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<&'static str, u64>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            duration_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn config(&mut self, value: &impl Serialize) -> anyhow::Result<()> {
        self.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn input(&mut self, key: &'static str, path: &Path) {
        self.inputs.insert(key, path.to_path_buf());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn seed(&mut self, key: &'static str, seed: u64) {
        self.seeds.insert(key, seed);
    }

    /// Writes `run_manifest.json` via a temporary file and rename.
    pub fn finish(mut self, dir: &Path) -> anyhow::Result<()> {
        self.duration_secs = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        let tmp = dir.join(format!(".{FILE}.tmp"));
        std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, dir.join(FILE)).with_context(|| format!("writing {}", dir.join(FILE).display()))?;
        Ok(())
    }
}
