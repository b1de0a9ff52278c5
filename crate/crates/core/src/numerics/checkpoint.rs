//! Parameter checkpoints: a JSON manifest plus a little-endian `f64` blob
//! stored next to it with the extension `.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet, Tensor};

const FORMAT: &str = "ganaug-params";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    blob_bytes: usize,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Loaded parameters and the free-form metadata saved with them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub meta: serde_json::Value,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn io_err(path: &Path, source: std::io::Error) -> NumericsError {
    NumericsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, message: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn save_params(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<(), NumericsError> {
    let blob_file = blob_path(path);
    let mut blob = Vec::with_capacity(params.numel() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len(),
        tensors,
        meta,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| io_err(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| bad(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn load_params(path: &Path) -> Result<Checkpoint, NumericsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| bad(path, format!("manifest line {} column {}: {e}", e.line(), e.column())))?;
    if manifest.format != FORMAT {
        return Err(bad(path, format!("unknown format `{}`", manifest.format)));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| io_err(&blob_file, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(bad(
            &blob_file,
            format!("blob has {} bytes, manifest declares {}", blob.len(), manifest.blob_bytes),
        ));
    }
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if e.offset % 8 != 0 || end > blob.len() {
            return Err(bad(
                &blob_file,
                format!("tensor `{}` at byte {} overruns the blob", e.name, e.offset),
            ));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| bad(path, format!("tensor `{}`: {err}", e.name)))?;
        params.insert(e.name, t);
    }
    Ok(Checkpoint {
        params,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::ones(&[3, 2]));
        ps.insert("b", Tensor::scalar(-1.5));
        save_params(&path, &ps, serde_json::json!({"k": 1})).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.params, ps);
        assert_eq!(back.meta["k"], 1);
        let blob = path.with_extension("bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_params(&path).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }
}
