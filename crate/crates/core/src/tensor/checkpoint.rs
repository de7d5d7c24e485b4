//! Checkpoint directories: `manifest.json` describing every tensor plus one
//! little-endian float64 blob `tensors.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "fefa-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<CheckpointEntry>,
    /// Free-form state carried alongside the tensors (epoch, optimizer step).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(CheckpointEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        entries,
        meta,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, Vec<(String, Tensor)>)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("{}: blob too short for shape {:?}", e.name, e.shape))
        })?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name.clone(), Tensor::from_parts(e.shape.clone(), data)));
    }
    Ok((manifest, out))
}
