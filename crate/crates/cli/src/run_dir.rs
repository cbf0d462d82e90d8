//! `runs/<name>/` output directories and their manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let name = cfg.get("name").unwrap_or(command);
        let path = Path::new(cfg.get("runs_dir").unwrap_or("runs")).join(name);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the resolved configuration with input digests as comments, so
    /// the manifest doubles as a config file for a rerun.
    pub fn write_manifest(&self, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let mut text = format!("# tdtd {command}\n");
        for (key, path) in cfg.input_paths() {
            text.push_str(&format!("# sha256 {key} {} {}\n", file_digest(&path)?, path.display()));
        }
        text.push_str(&cfg.to_text());
        let path = self.file(MANIFEST);
        write(&path, &text)?;
        Ok(path)
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(digest(&bytes))
}

pub fn digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}
