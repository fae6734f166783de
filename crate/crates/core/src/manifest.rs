//! Append-only experiment manifest.
//!
//! Every command appends one entry recording its effective configuration,
//! seeds, input files, and output files. Output files must exist at append
//! time, so the manifest never references artifacts that were not written.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub experiment_id: String,
    pub command: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub results: Option<serde_json::Value>,
}

impl ManifestEntry {
    pub fn new(
        experiment_id: impl Into<String>,
        command: impl Into<String>,
        config: serde_json::Value,
        seed: u64,
    ) -> Self {
        ManifestEntry {
            experiment_id: experiment_id.into(),
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            results: None,
        }
    }

    pub fn with_inputs(mut self, inputs: &[&Path]) -> Self {
        self.inputs = inputs.iter().map(|p| p.display().to_string()).collect();
        self
    }

    pub fn with_outputs(mut self, outputs: &[&Path]) -> Self {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self
    }

    pub fn with_results(mut self, results: serde_json::Value) -> Self {
        self.results = Some(results);
        self
    }
}

/// Append an entry to `<dir>/manifest.jsonl`, validating that every
/// referenced output exists.
pub fn append_manifest(dir: &Path, entry: &ManifestEntry) -> Result<PathBuf> {
    for out in &entry.outputs {
        if !Path::new(out).exists() {
            return Err(Error::Config(format!(
                "manifest entry references missing output file {out:?}"
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    f.write_all(line.as_bytes())?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_validates_outputs_and_accumulates() {
        let dir = tempfile::tempdir().unwrap();
        let out_file = dir.path().join("artifact.jsonl");

        let entry = ManifestEntry::new("exp1", "elicit", serde_json::json!({"n_qa": 2}), 7)
            .with_outputs(&[&out_file]);
        assert!(append_manifest(dir.path(), &entry).is_err());

        std::fs::write(&out_file, "data\n").unwrap();
        let path = append_manifest(dir.path(), &entry).unwrap();
        let entry2 = ManifestEntry::new("exp1", "select", serde_json::json!({"k": 1}), 8)
            .with_inputs(&[&out_file]);
        append_manifest(dir.path(), &entry2).unwrap();

        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].command, "elicit");
        assert_eq!(entries[1].command, "select");
        assert_eq!(entries[0].outputs, vec![out_file.display().to_string()]);
    }
}
