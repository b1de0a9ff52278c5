//! Latent table files: JSON manifest (sample ids, dimension, metadata) plus
//! a `.bin` blob of little-endian `f64` rows in manifest order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_artifact, write_file, Error, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "ganaug-latents";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    count: usize,
    latent_dim: usize,
    blob: String,
    blob_bytes: usize,
    sample_ids: Vec<String>,
    final_losses: Vec<f64>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Inverted latents `w*` keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    latents: Tensor,
    final_losses: Vec<f64>,
    pub meta: serde_json::Value,
}

impl LatentTable {
    /// `latents` is `[N, d_w]` with row `i` belonging to `ids[i]`.
    pub fn new(ids: Vec<String>, latents: Tensor, final_losses: Vec<f64>, meta: serde_json::Value) -> Result<Self> {
        if latents.ndim() != 2 || latents.shape()[0] != ids.len() || final_losses.len() != ids.len() {
            return Err(Error::invalid(format!(
                "latent table with {} ids needs [{}, d] latents and {} losses, got {:?} and {}",
                ids.len(),
                ids.len(),
                ids.len(),
                latents.shape(),
                final_losses.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate sample id `{id}` in latent table")));
            }
        }
        Ok(Self {
            ids,
            index,
            latents,
            final_losses,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn latents(&self) -> &Tensor {
        &self.latents
    }

    pub fn final_losses(&self) -> &[f64] {
        &self.final_losses
    }

    pub fn get(&self, sample_id: &str) -> Option<&[f64]> {
        let d = self.latent_dim();
        self.index.get(sample_id).map(|&i| &self.latents.data()[i * d..(i + 1) * d])
    }

    /// Rows for `ids` stacked as `[ids.len(), d_w]`; lists every missing id.
    pub fn rows(&self, ids: &[String]) -> Result<Tensor> {
        let d = self.latent_dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        let mut missing = Vec::new();
        for id in ids {
            match self.get(id) {
                Some(row) => data.extend_from_slice(row),
                None => missing.push(id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingLatent(missing));
        }
        Ok(Tensor::new(vec![ids.len(), d], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob_path = path.with_extension("bin");
        let blob: Vec<u8> = self.latents.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            count: self.len(),
            latent_dim: self.latent_dim(),
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_bytes: blob.len(),
            sample_ids: self.ids.clone(),
            final_losses: self.final_losses.clone(),
            meta: self.meta.clone(),
        };
        write_file(&blob_path, &blob)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let loc = path.display().to_string();
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| {
            Error::format(
                format!("{loc} line {} column {}", e.line(), e.column()),
                format!("malformed latent table header: {e}"),
            )
        })?;
        if m.format != FORMAT {
            return Err(Error::format(loc, format!("unknown format `{}`", m.format)));
        }
        if m.sample_ids.len() != m.count || m.final_losses.len() != m.count || m.latent_dim == 0 {
            return Err(Error::format(loc, "sample list length disagrees with count"));
        }
        let blob_path = path.with_file_name(&m.blob);
        let blob = read_artifact(&blob_path)?;
        let expected = m.count * m.latent_dim * 8;
        if blob.len() != expected || m.blob_bytes != expected {
            return Err(Error::format(
                blob_path.display().to_string(),
                format!("blob holds {} bytes, expected {expected}", blob.len()),
            ));
        }
        let data = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let latents = Tensor::new(vec![m.count, m.latent_dim], data).map_err(|e| Error::format(loc.clone(), e.to_string()))?;
        Self::new(m.sample_ids, latents, m.final_losses, m.meta)
    }
}
