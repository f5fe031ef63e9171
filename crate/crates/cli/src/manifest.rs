use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::io::{sha256_file, OutDir};
use crate::opts::Opts;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Options after merging the config file; feeding this file back via `--config`
    /// repeats the run.
    pub config: Opts,
    /// Command-specific resolved settings, such as the generator constants.
    pub resolved: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub phases: Vec<Phase>,
}

impl RunManifest {
    pub fn new(command: &str, config: &Opts) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("mixdens".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint-format".to_string(), "1".to_string());
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: config.clone(),
            resolved: serde_json::Value::Null,
            seed: config.seed(),
            threads: rayon::current_num_threads(),
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            phases: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Run `f` and record its wall-clock time under `name`.
    pub fn phase<T, F: FnOnce() -> T>(&mut self, name: &str, f: F) -> T {
        let start = Instant::now();
        let out = f();
        self.record(name, start.elapsed().as_secs_f64());
        out
    }

    pub fn record(&mut self, name: &str, seconds: f64) {
        self.phases.push(Phase {
            name: name.to_string(),
            seconds,
        });
    }

    pub fn total_seconds(&self) -> f64 {
        self.phases.iter().map(|p| p.seconds).sum()
    }

    pub fn seconds_of(&self, name: &str) -> Option<f64> {
        self.phases.iter().find(|p| p.name == name).map(|p| p.seconds)
    }

    /// Write `manifest.json` last, listing everything `out` has written.
    pub fn finish(mut self, out: &mut OutDir) -> Result<()> {
        self.outputs = out.written().clone();
        out.write_json(MANIFEST_FILE, &self)?;
        Ok(())
    }
}
