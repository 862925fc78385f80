//! Reproducibility manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 of the compact JSON serialization.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 of a file, or of the sorted `(name, digest)` listing of a
/// directory tree. Manifests inside a tree are skipped since they carry
/// timestamps.
pub fn path_digest(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        let mut hasher = Sha256::new();
        for entry in entries {
            let name = entry
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if name == MANIFEST_FILE && entry.is_file() {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(path_digest(&entry)?.as_bytes());
            hasher.update(b"\n");
        }
        Ok(hex::encode(hasher.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    /// Input role (`kg`, `run`, ...) → content digest.
    pub inputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            seeds: Vec::new(),
            inputs: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.to_string(), path_digest(path)?);
        Ok(self)
    }

    pub fn metrics<T: Serialize>(mut self, metrics: &T) -> Self {
        self.metrics = serde_json::to_value(metrics).expect("serializable metrics");
        self
    }

    /// A copy with the timestamp blanked, for comparing runs.
    pub fn without_timestamp(&self) -> Self {
        Self {
            timestamp: String::new(),
            ..self.clone()
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        crate::jsonl::write_json(&out_dir.join(MANIFEST_FILE), self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::jsonl::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_track_content() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        std::fs::write(&f, "hello").unwrap();
        let d1 = path_digest(&f).unwrap();
        assert_eq!(d1, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        let tree1 = path_digest(dir.path()).unwrap();
        std::fs::write(&f, "hello!").unwrap();
        assert_ne!(path_digest(&f).unwrap(), d1);
        assert_ne!(path_digest(dir.path()).unwrap(), tree1);
        let tree2 = path_digest(dir.path()).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(path_digest(dir.path()).unwrap(), tree2);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("stats", json_digest(&1u8))
            .seed(7)
            .metrics(&[1.0, 2.0]);
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.without_timestamp().timestamp, "");
    }
}
