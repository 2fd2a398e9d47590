//! Run-level manifest of content hashes, and the run directory lock.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    /// Relative path (forward slashes) to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestDiff {
    pub modified: Vec<String>,
    pub missing: Vec<String>,
    pub unlisted: Vec<String>,
}

impl ManifestDiff {
    pub fn is_clean(&self) -> bool {
        self.modified.is_empty() && self.missing.is_empty() && self.unlisted.is_empty()
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn skipped(rel: &str) -> bool {
    rel == MANIFEST_FILE || rel == LOCK_FILE || rel.ends_with(".tmp")
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> CliResult<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if !skipped(&rel) {
                out.push((rel, path));
            }
        }
    }
    Ok(())
}

impl RunManifest {
    /// Hashes every file under `root` except the manifest, lock and temporaries.
    pub fn scan(root: &Path) -> CliResult<Self> {
        let mut found = Vec::new();
        walk(root, root, &mut found)?;
        let mut files = BTreeMap::new();
        for (rel, path) in found {
            files.insert(rel, sha256_file(&path)?);
        }
        Ok(RunManifest { files })
    }

    pub fn write(&self, root: &Path) -> CliResult<()> {
        let path = root.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))
    }

    pub fn read(root: &Path) -> CliResult<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Verification(format!("{}: {e}", path.display())))
    }

    /// Rescans the run and rewrites its manifest.
    pub fn refresh(root: &Path) -> CliResult<Self> {
        let m = Self::scan(root)?;
        m.write(root)?;
        Ok(m)
    }

    pub fn diff(&self, actual: &RunManifest) -> ManifestDiff {
        let mut d = ManifestDiff::default();
        for (rel, hash) in &self.files {
            match actual.files.get(rel) {
                None => d.missing.push(rel.clone()),
                Some(h) if h != hash => d.modified.push(rel.clone()),
                Some(_) => {}
            }
        }
        d.unlisted = actual
            .files
            .keys()
            .filter(|k| !self.files.contains_key(*k))
            .cloned()
            .collect();
        d
    }
}

/// Compares a run directory against its manifest.
pub fn verify(root: &Path) -> CliResult<ManifestDiff> {
    Ok(RunManifest::read(root)?.diff(&RunManifest::scan(root)?))
}

/// Exclusive ownership of a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::io(
                &path,
                "run directory is locked by another process (remove the lock file if that process is gone)",
            )),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
