//! Run manifests written beside every pipeline output.
//!
//! A manifest records what produced a file: the command, its arguments, the
//! seed, the endpoints used and content hashes of inputs and outputs. The
//! `config_hash` covers everything except outputs and counts, and includes the
//! hashes of the manifests of its inputs, so a chain of runs can be verified
//! end to end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<FileDigest> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(std::fs::read(path)?)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub args: Value,
    pub seed: u64,
    pub endpoints: Vec<String>,
    pub inputs: Vec<FileDigest>,
    /// `config_hash` of each input's own manifest, when present.
    pub parents: Vec<String>,
    pub outputs: Vec<FileDigest>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub counts: BTreeMap<String, u64>,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Collects a run's facts before its outputs exist.
pub struct ManifestBuilder {
    command: String,
    args: Value,
    seed: u64,
    endpoints: Vec<String>,
    inputs: Vec<FileDigest>,
    parents: Vec<String>,
    started_at: DateTime<Utc>,
    counts: BTreeMap<String, u64>,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: Value, seed: u64, started_at: DateTime<Utc>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            args,
            seed,
            endpoints: Vec::new(),
            inputs: Vec::new(),
            parents: Vec::new(),
            started_at,
            counts: BTreeMap::new(),
        }
    }

    pub fn endpoint(&mut self, id: &str) -> &mut Self {
        if !self.endpoints.iter().any(|e| e == id) {
            self.endpoints.push(id.to_string());
        }
        self
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<&mut Self> {
        self.inputs.push(FileDigest::of(path)?);
        let parent = manifest_path(path);
        if let Ok(text) = std::fs::read_to_string(&parent) {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                self.parents.push(m.config_hash);
            }
        }
        Ok(self)
    }

    pub fn count(&mut self, key: &str, value: u64) -> &mut Self {
        self.counts.insert(key.to_string(), value);
        self
    }

    fn config_hash(&self) -> String {
        let canonical = serde_json::json!({
            "command": self.command,
            "args": self.args,
            "seed": self.seed,
            "endpoints": self.endpoints,
            "inputs": self.inputs.iter().map(|i| &i.sha256).collect::<Vec<_>>(),
            "parents": self.parents,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    /// Hashes `outputs` and writes the manifest beside `primary`.
    pub fn finish(&self, primary: &Path, outputs: &[&Path], finished_at: DateTime<Utc>) -> std::io::Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash(),
            args: self.args.clone(),
            seed: self.seed,
            endpoints: self.endpoints.clone(),
            inputs: self.inputs.clone(),
            parents: self.parents.clone(),
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
            started_at: self.started_at,
            finished_at,
            counts: self.counts.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        crate::corpus::write_atomic(&manifest_path(primary), text.as_bytes())?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chains_through_parent_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        std::fs::write(&a, "x\n").unwrap();
        let t = DateTime::UNIX_EPOCH;
        let first = ManifestBuilder::new("synth", serde_json::json!({}), 1, t).finish(&a, &[&a], t).unwrap();
        std::fs::write(&b, "y\n").unwrap();
        let mut mb = ManifestBuilder::new("filter", serde_json::json!({"k": 1}), 1, t);
        mb.input(&a).unwrap();
        let second = mb.finish(&b, &[&b], t).unwrap();
        assert_eq!(second.parents, vec![first.config_hash.clone()]);
        assert_eq!(manifest_path(&b), dir.path().join("b.jsonl.manifest.json"));
        let again = {
            let mut mb = ManifestBuilder::new("filter", serde_json::json!({"k": 1}), 1, t);
            mb.input(&a).unwrap();
            mb.finish(&b, &[&b], t).unwrap()
        };
        assert_eq!(again.config_hash, second.config_hash);
    }
}
