//! Run directory layout: `config.toml`, `checkpoints/`, `logs/`, `plots/`
//! and a `manifest.json` written last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", tmp.display())))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("cannot rename into {}: {e}", path.display())))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    artifact: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seed: u64,
    tags: Vec<String>,
    overrides: &'a [String],
    files: Vec<ManifestFile>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the layout; a directory that already holds a manifest is a
    /// completed run and is never overwritten.
    pub fn create(root: &Path) -> CliResult<Self> {
        if root.join(MANIFEST).exists() {
            return Err(CliError::Io(format!(
                "{} is a completed run directory; choose another output",
                root.display()
            )));
        }
        for sub in ["checkpoints", "logs", "plots"] {
            fs::create_dir_all(root.join(sub))
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", root.join(sub).display())))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path(rel), bytes)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> CliResult<()> {
        self.write("config.toml", cfg.to_toml_string().as_bytes())
    }

    /// Hashes every file under the run directory and writes the manifest.
    pub fn finish(&self, command: &str, cfg: &RunConfig) -> CliResult<()> {
        let mut files = Vec::new();
        collect_files(&self.root, &self.root, &mut files)?;
        files.sort();
        let mut entries = Vec::with_capacity(files.len());
        for rel in files {
            let bytes = fs::read(self.root.join(&rel))?;
            entries.push(ManifestFile {
                path: rel,
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            artifact: "flowgrpo",
            version: ARTIFACT_VERSION,
            command,
            config_sha256: sha256_hex(cfg.to_toml_string().as_bytes()),
            seed: cfg.seed()?,
            tags: cfg.tags(),
            overrides: cfg.overrides(),
            files: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        self.write(MANIFEST, json.as_bytes())
    }
}

/// Relative paths of regular files, skipping nested run directories.
fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> CliResult<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            if path.join(MANIFEST).exists() {
                continue;
            }
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel != MANIFEST && !rel.ends_with(".tmp") {
                out.push(rel);
            }
        }
    }
    Ok(())
}
