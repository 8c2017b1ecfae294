//! `run.json`: what a command was given and what it wrote.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use clasp::config::KeyValues;
use serde_json::{json, Map, Value};

use crate::failure::{io, Failure};

pub struct RunManifest {
    command: &'static str,
    seed: Option<u64>,
    config: KeyValues,
    inputs: Map<String, Value>,
    outputs: Map<String, Value>,
    started: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            seed: None,
            config: KeyValues::default(),
            inputs: Map::new(),
            outputs: Map::new(),
            started: now_ms(),
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// The fully resolved configuration of the run.
    pub fn config(&mut self, kv: KeyValues) {
        self.config = kv;
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.into(), json!(path.display().to_string()));
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.into(), json!(path.display().to_string()));
    }

    pub fn write(self, path: &Path) -> Result<(), Failure> {
        let config: Map<String, Value> = self.config.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        let doc = json!({
            "tool": "clasp",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_unix_ms": self.started as u64,
            "finished_unix_ms": now_ms() as u64,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("json values serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(io(path))
    }
}
