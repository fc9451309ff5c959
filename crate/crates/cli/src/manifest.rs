//! Run manifests and output-file helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

/// SHA-256 over `"blob <len>\0" ++ bytes`, the object hash git uses in its
/// SHA-256 repository format.
pub fn git_style_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hashes of every file a command read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputLog(pub BTreeMap<String, String>);

impl InputLog {
    pub fn record(&mut self, path: &Path, bytes: &[u8]) {
        self.0.insert(path.display().to_string(), git_style_hash(bytes));
    }

    /// One hash over all inputs, independent of their paths.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for hash in self.0.values() {
            h.update(hash.as_bytes());
        }
        hex(&h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: InputLog,
    pub input_digest: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub status: String,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Collects outputs written into one run directory.
pub struct RunDir {
    pub root: PathBuf,
    written: Vec<String>,
    started: u64,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io_error(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: vec![],
            started: now_ms(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| io_error(&path, e))?;
        self.note(rel);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Record a file written by other means.
    pub fn note(&mut self, rel: &str) {
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
    }

    pub fn finish<C: Serialize>(
        mut self,
        command: &str,
        config: &C,
        seeds: BTreeMap<String, u64>,
        inputs: InputLog,
        status: &str,
    ) -> Result<(), CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Data(e.to_string()))?;
        let mut outputs = self.written.clone();
        outputs.push(MANIFEST_FILE.to_string());
        let manifest = RunManifest {
            tool: format!("attribank {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config,
            seeds,
            input_digest: inputs.digest(),
            inputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            outputs,
            status: status.to_string(),
        };
        self.write_json(MANIFEST_FILE, &manifest)?;
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_sha256_blob_hash() {
        // printf 'blob 6\0hello\n' | sha256sum
        assert_eq!(
            git_style_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn digest_ignores_paths() {
        let mut a = InputLog::default();
        a.record(Path::new("x.json"), b"{}");
        let mut b = InputLog::default();
        b.record(Path::new("elsewhere/x.json"), b"{}");
        assert_eq!(a.digest(), b.digest());
    }
}
