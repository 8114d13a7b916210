//! Run manifests: config hash, seed ledger and checksums of every produced
//! data file. Rerunning with the same config and seed reproduces identical
//! data-file checksums; only the wall-clock entry may differ.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Hex SHA-256 of the serialized configuration.
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_ms: u64,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Collects artifacts as they are written and finalizes the manifest.
pub struct ManifestBuilder {
    dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started: std::time::Instant,
    files: Vec<FileEntry>,
}

impl ManifestBuilder {
    pub fn new(dir: &Path, command: &str, config_toml: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ManifestBuilder {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config_hash: sha256_hex(config_toml.as_bytes()),
            seed,
            started: std::time::Instant::now(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Write a data file under the run directory and record its checksum.
    pub fn write_file(&mut self, rel_path: &str, content: &str) -> Result<()> {
        let full = self.dir.join(rel_path);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&full, content)?;
        self.files.push(FileEntry {
            path: rel_path.to_string(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len() as u64,
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel_path: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        text.push('\n');
        self.write_file(rel_path, &text)
    }

    /// Finalize: write `manifest.json` (itself excluded from the file list).
    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash,
            seed: self.seed,
            wall_clock_ms: self.started.elapsed().as_millis() as u64,
            files: self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        text.push('\n');
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config {
        field: "run_dir".into(),
        reason: format!("missing manifest at {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_records_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ManifestBuilder::new(dir.path(), "test", "[x]\n", 3).unwrap();
        b.write_file("data.csv", "a,b\n1,2\n").unwrap();
        let manifest = b.finish().unwrap();
        assert_eq!(manifest.files.len(), 1);
        assert_eq!(manifest.files[0].path, "data.csv");
        assert_eq!(manifest.files[0].sha256.len(), 64);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.files, manifest.files);
        assert_eq!(loaded.config_hash, manifest.config_hash);
    }
}
