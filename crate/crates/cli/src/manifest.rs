//! Run manifests: every command records what it did and what it wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempose_core::Result;

/// Written atomically as `manifest.json` at the end of a successful run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    /// Crate version.
    pub version: String,
    /// SHA-256 of the config file (or of the argument summary when no config
    /// file is involved).
    pub config_sha256: String,
    /// The seed in effect, when the command is randomized.
    pub seed: Option<u64>,
    /// Worker cap from TEMPOSE_THREADS.
    pub threads: usize,
    /// Output files, relative to the output directory, sorted.
    pub artifacts: Vec<String>,
    /// Wall-clock duration of the run in seconds.
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

impl RunManifest {
    pub fn new(command: &str, config_sha256: String, seed: Option<u64>, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            seed,
            threads,
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    /// Record artifacts relative to the output directory, keeping the list
    /// sorted and deduplicated.
    pub fn record_artifacts(&mut self, out_dir: &Path, paths: &[PathBuf]) {
        for p in paths {
            let rel = p
                .strip_prefix(out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned();
            self.artifacts.push(rel);
        }
        self.artifacts.sort();
        self.artifacts.dedup();
    }

    /// Atomic write: serialize to a temp file in the same directory, then
    /// rename over the final name.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let tmp = out_dir.join("manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("synth-gen", sha256_hex(b"cfg"), Some(7), 1);
        m.record_artifacts(
            dir.path(),
            &[dir.path().join("b.csv"), dir.path().join("a.jsonl")],
        );
        m.wall_clock_seconds = 1.25;
        let path = m.write(dir.path()).unwrap();
        let loaded: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.artifacts, vec!["a.jsonl", "b.csv"]);
        assert!(!dir.path().join("manifest.json.tmp").exists());
    }
}
