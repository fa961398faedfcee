//! Run manifests: the reproducibility record every output directory gets.
//!
//! A manifest lists the tool version, timestamp, the exact command, the
//! resolved configuration, and a SHA-256 hash of every input and output
//! file, so a run can be audited and compared byte for byte.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Default)]
pub struct Manifest {
    command: String,
    settings: Vec<(String, String)>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            ..Default::default()
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, label: &str, path: &Path) -> &mut Self {
        self.inputs.push((label.to_string(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Writes `manifest.txt` into `dir`, hashing all recorded files.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut text = String::new();
        let _ = writeln!(text, "tool\theadforge {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "command\t{}", self.command);
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(text, "timestamp_epoch_s\t{epoch}");
        for (k, v) in &self.settings {
            let _ = writeln!(text, "setting\t{k}\t{v}");
        }
        for (label, path) in &self.inputs {
            let _ = writeln!(text, "input\t{label}\t{}\t{}", path.display(), file_sha256(path)?);
        }
        for path in &self.outputs {
            let _ = writeln!(text, "output\t{}\t{}", file_name(path), file_sha256(path)?);
        }
        let target = dir.join(MANIFEST_NAME);
        std::fs::write(&target, text)
            .with_context(|| format!("writing manifest {}", target.display()))?;
        Ok(target)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}
