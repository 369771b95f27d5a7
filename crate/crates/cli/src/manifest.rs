//! Run manifests: every artifact-producing command records its resolved
//! configuration next to its outputs, with enough detail to re-run it.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde_json::{json, Value};
use ssa_unet_core::error::Result;

pub struct ManifestBuilder {
    command: &'static str,
    started: String,
    resolved: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, resolved: Value) -> Self {
        ManifestBuilder {
            command,
            started: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            resolved,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn extend_resolved(&mut self, key: &str, value: Value) -> &mut Self {
        self.resolved[key] = value;
        self
    }

    /// Writes the manifest JSON and returns its path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let body = json!({
            "command": self.command,
            "argv": std::env::args().collect::<Vec<_>>(),
            "tool_version": env!("CARGO_PKG_VERSION"),
            "resolved": self.resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at": self.started,
            "finished_at": Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
        });
        std::fs::write(path, serde_json::to_string_pretty(&body).expect("valid json"))?;
        Ok(path.to_path_buf())
    }
}

/// Sibling manifest path for a single-file artifact.
pub fn sibling_manifest(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
