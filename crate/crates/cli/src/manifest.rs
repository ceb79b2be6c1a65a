//! `run_manifest.json`, written into every output directory.

use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub code_version: String,
    pub seed: Option<u64>,
    /// Fully materialized settings, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
}

pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                code_version: env!("CARGO_PKG_VERSION").into(),
                seed: None,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix_s: started,
                wall_time_s: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn config(&mut self, config: impl Serialize) -> &mut Self {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.to_path_buf());
        self
    }

    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.manifest.wall_time_s = self.start.elapsed().as_secs_f64();
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        std::fs::write(dir.join(MANIFEST_FILE), text)
    }
}
