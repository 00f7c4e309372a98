//! Checkpoint directory: `manifest.json` plus `params.bin`.
//!
//! The blob starts with the magic bytes `PSTO` and a little-endian `u32`
//! format version, followed by every parameter's values (little-endian,
//! row-major) in manifest order. Manifest offsets are absolute byte
//! offsets into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NnError;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSTO";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub optimizer_step: u64,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<serde_json::Value>,
}

fn io_err(path: &Path, e: std::io::Error) -> NnError {
    NnError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> NnError {
    NnError::Format { path: path.to_path_buf(), message: message.into() }
}

pub fn write_checkpoint<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    optimizer_step: u64,
    model_config: Option<serde_json::Value>,
) -> Result<(), NnError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut blob = Vec::with_capacity(HEADER_LEN + store.num_scalars() * T::BYTES);
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            offset: blob.len() as u64,
            count: t.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = CheckpointManifest {
        format: "PSTO".into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.into(),
        optimizer_step,
        blob: BLOB_FILE.into(),
        params: entries,
        model_config,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| fmt_err(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, NnError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| fmt_err(&path, e.to_string()))?;
    if manifest.format != "PSTO" || manifest.version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            &path,
            format!("unsupported checkpoint format {} v{}", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

pub fn read_checkpoint<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, CheckpointManifest), NnError> {
    let manifest = read_manifest(dir)?;
    let blob_path: PathBuf = dir.join(&manifest.blob);
    if manifest.dtype != T::DTYPE {
        return Err(fmt_err(&blob_path, format!("dtype {} does not match {}", manifest.dtype, T::DTYPE)));
    }
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    if blob.len() < HEADER_LEN || &blob[..4] != CHECKPOINT_MAGIC {
        return Err(fmt_err(&blob_path, "bad magic"));
    }
    let version = u32::from_le_bytes([blob[4], blob[5], blob[6], blob[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err(&blob_path, format!("unsupported blob version {version}")));
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let count = e.count as usize;
        if count != e.shape[0] * e.shape[1] {
            return Err(fmt_err(&blob_path, format!("{}: count does not match shape", e.name)));
        }
        let start = e.offset as usize;
        let end = start + count * T::BYTES;
        if start < HEADER_LEN || end > blob.len() {
            return Err(fmt_err(&blob_path, format!("{}: values out of bounds (file truncated?)", e.name)));
        }
        let data = blob[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        store.insert(&e.name, Tensor::from_vec(e.shape[0], e.shape[1], data)?)?;
    }
    Ok((store, manifest))
}
