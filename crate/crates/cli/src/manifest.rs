use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun an invocation. Written before any work starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub preset: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(subcommand: &str, preset: &str, seed: Option<u64>, config: Value) -> Self {
        RunManifest {
            tool: "cbqa",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            preset: preset.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Write the manifest and return the SHA-256 of its bytes.
    pub fn write(&self, path: &Path) -> Result<String> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(sha256_hex(&bytes))
    }
}

/// `<file><suffix>` in the same directory.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// `<file>.manifest.json` beside a single-file artifact.
pub fn beside(artifact: &Path) -> PathBuf {
    sibling(artifact, ".manifest.json")
}
