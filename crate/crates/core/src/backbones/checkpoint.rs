//! Checkpoint files: a binary parameter blob plus a JSON sidecar.
//!
//! `<stem>.bin` holds [`ParamStore::to_bytes`]; `<stem>.json` holds
//! [`CheckpointMeta`]. Both are written to a temporary name and renamed, the
//! sidecar last, so a present sidecar marks a complete checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::train::EpochRecord;
use super::{Architecture, Backbone};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: String,
    pub architecture: Architecture,
    pub stage: usize,
    pub epoch: usize,
    pub seed: u64,
    pub parameter_count: usize,
    pub content_hash: String,
    /// Learning rate in effect when the checkpoint was written.
    pub lr: f64,
    /// Epoch log of the stage that produced this checkpoint.
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

pub fn blob_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

pub fn sidecar_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(dir: &Path, stem: &str, backbone: &Backbone, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&blob_path(dir, stem), &backbone.params.to_bytes())?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(&sidecar_path(dir, stem), &json)
}

pub fn read_meta(dir: &Path, stem: &str) -> Result<CheckpointMeta> {
    let path = sidecar_path(dir, stem);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads and hash-verifies a checkpoint.
pub fn load(dir: &Path, stem: &str) -> Result<(Backbone, CheckpointMeta)> {
    let meta = read_meta(dir, stem)?;
    let path = blob_path(dir, stem);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let params = ParamStore::from_bytes(&bytes)?;
    let hash = params.content_hash();
    if hash != meta.content_hash {
        return Err(Error::Checkpoint(format!(
            "{} content hash {hash} does not match sidecar {}",
            path.display(),
            meta.content_hash
        )));
    }
    let mut backbone = Backbone::new(meta.backbone.clone(), meta.architecture.clone(), meta.seed)?;
    backbone.set_params(&params)?;
    Ok((backbone, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::LogisticConfig;

    fn model() -> Backbone {
        Backbone::new(
            "toy",
            Architecture::Logistic(LogisticConfig {
                height: 2,
                width: 2,
                channels: 3,
            }),
            4,
        )
        .unwrap()
    }

    fn meta(b: &Backbone) -> CheckpointMeta {
        CheckpointMeta {
            backbone: b.name.clone(),
            architecture: b.arch.clone(),
            stage: 2,
            epoch: 5,
            seed: 4,
            parameter_count: b.params.scalar_count(),
            content_hash: b.params.content_hash(),
            lr: 1e-4,
            history: vec![],
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = model();
        b.params.get_mut("head.b").unwrap().fill(0.25);
        save(dir.path(), "stage_2", &b, &meta(&b)).unwrap();
        let (back, m) = load(dir.path(), "stage_2").unwrap();
        assert_eq!(back, b);
        assert_eq!(m, meta(&b));
    }

    #[test]
    fn tampered_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let b = model();
        save(dir.path(), "s", &b, &meta(&b)).unwrap();
        let path = blob_path(dir.path(), "s");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path(), "s"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_checkpoint_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path(), "nope"), Err(Error::Io { .. })));
    }
}
