//! Parameter checkpoint manifest.
//!
//! Layout: a single JSON document with a `params` array; each entry carries
//! the parameter name, its shape, and the row-major values as base64-encoded
//! little-endian 32-bit floats. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "cpolab-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unknown manifest format {0:?}")]
    UnknownFormat(String),
    #[error("parameter {name}: shape {shape:?} does not match {len} values")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    params: Vec<ManifestEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
    let entries: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data().iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: B64.encode(bytes),
            }
        })
        .collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        params: entries,
    };
    let json = serde_json::to_string(&manifest)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CheckpointError::UnknownFormat(manifest.format));
    }
    let mut out = BTreeMap::new();
    for entry in manifest.params {
        let bytes = B64
            .decode(entry.data.as_bytes())
            .map_err(|e| CheckpointError::Malformed(format!("{}: {e}", entry.name)))?;
        if bytes.len() % 4 != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{}: byte length {} not a multiple of 4",
                entry.name,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if entry.shape.iter().product::<usize>() != values.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name,
                shape: entry.shape,
                len: values.len(),
            });
        }
        out.insert(entry.name, (entry.shape, values));
    }
    Ok(out)
}
