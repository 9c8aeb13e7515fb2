//! Run manifest: what produced an output directory, with artifact hashes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_paths: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub artifacts: Vec<Artifact>,
    #[serde(skip)]
    dir: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: String, dir: &Path) -> Self {
        Self {
            command,
            config_paths: Vec::new(),
            seeds: Vec::new(),
            output_dir: dir.display().to_string(),
            artifacts: Vec::new(),
            dir: dir.to_path_buf(),
        }
    }

    /// Writes an artifact into the output directory and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))?;
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn finish(self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let mut json = serde_json::to_string_pretty(&self)?;
        json.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
