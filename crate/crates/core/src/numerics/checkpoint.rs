//! Checkpoint persistence: a JSON manifest plus a flat little-endian `f64` blob.
//!
//! ```text
//! <dir>/manifest.json   {"format":"simulstream-ckpt-v1","dtype":"f64","tensors":[...],"meta":{...}}
//! <dir>/tensors.bin     concatenated values in manifest order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NumericsError;

pub const CHECKPOINT_FORMAT: &str = "simulstream-ckpt-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn io_err(path: &Path, e: std::io::Error) -> NumericsError {
    NumericsError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(
    dir: &Path,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<(), NumericsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".to_string(),
            })
            .collect(),
        meta,
    };
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    for (_, t) in tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let mut f = fs::File::create(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    f.write_all(&blob).map_err(|e| io_err(&blob_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value), NumericsError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    let mut offset = 0usize;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != "f64" {
            return Err(NumericsError::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > blob.len() {
            return Err(NumericsError::Checkpoint(format!(
                "tensor {} needs bytes {offset}..{end} but blob has {}",
                entry.name,
                blob.len()
            )));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
        offset = end;
    }
    if offset != blob.len() {
        return Err(NumericsError::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            blob.len() - offset
        )));
    }
    Ok((out, manifest.meta))
}
