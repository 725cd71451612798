//! Checkpoints: a JSON manifest naming every parameter tensor with its shape
//! and offset, next to a raw little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint payload corrupt: {0}")]
    Payload(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: u64,
    /// Free-form run configuration, stored verbatim.
    pub config: serde_json::Value,
    /// File name of the payload, relative to the manifest.
    pub payload: String,
    pub params: Vec<ParamEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `ckpt-<step>.json` and `ckpt-<step>.bin` into `dir`; returns the
/// manifest path.
pub fn save(dir: &Path, step: u64, config: serde_json::Value, params: &ParamStore) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = format!("ckpt-{step:08}");
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        step,
        config,
        payload: format!("{stem}.bin"),
        params: entries,
    };
    let bin = dir.join(&manifest.payload);
    fs::write(&bin, &bytes).map_err(io_err(&bin))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&json))?;
    Ok(json)
}

pub fn load(manifest_path: &Path) -> Result<(Manifest, ParamStore)> {
    let text = fs::read(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let bin = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Payload(format!(
            "{} bytes is not a multiple of 4",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| CheckpointError::Payload(format!("{} runs past the payload", e.name)))?;
        let t =
            Tensor::new(e.shape.clone(), slice.to_vec()).map_err(|err| CheckpointError::Payload(err.to_string()))?;
        store
            .push(e.name.clone(), t)
            .map_err(|err| CheckpointError::Payload(err.to_string()))?;
    }
    Ok((manifest, store))
}

/// Manifests in `dir`, oldest first.
pub fn list(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("ckpt-") && name.ends_with(".json")
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    Ok(list(dir)?.pop())
}

/// Deletes all but the newest `keep` checkpoints.
pub fn prune(dir: &Path, keep: usize) -> Result<()> {
    let all = list(dir)?;
    let excess = all.len().saturating_sub(keep);
    for json in &all[..excess] {
        let bin = json.with_extension("bin");
        fs::remove_file(json).map_err(io_err(json))?;
        if bin.exists() {
            fs::remove_file(&bin).map_err(io_err(&bin))?;
        }
    }
    Ok(())
}
