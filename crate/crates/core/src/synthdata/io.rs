//! Dataset files: JSON manifest plus a little-endian `f32` blob (`.bin`
//! next to the manifest). Samples are contiguous, channels ordered A, B, mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PairedImage};
use crate::error::{read_artifact, write_file, Error, Result};

const FORMAT: &str = "ganaug-dataset";
const CHANNELS: [&str; 3] = ["A", "B", "mask"];

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    count: usize,
    resolution: usize,
    seed: u64,
    channel_count: usize,
    channel_order: Vec<String>,
    /// False when the mask channel holds placeholders for unmasked samples.
    has_mask: Vec<bool>,
    blob: String,
    blob_bytes: usize,
    sample_ids: Vec<String>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let res = dataset.resolution;
    let plane = res * res;
    let mut blob = Vec::with_capacity(dataset.len() * 3 * plane * 4);
    for s in &dataset.samples {
        if s.resolution != res {
            return Err(Error::invalid(format!(
                "sample {} has resolution {}, dataset {res}",
                s.sample_id, s.resolution
            )));
        }
        let zeros = vec![0.0; plane];
        let mask = s.body_mask.as_deref().unwrap_or(&zeros);
        for v in s.modality_a.iter().chain(&s.modality_b).chain(mask) {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let blob_path = path.with_extension("bin");
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        count: dataset.len(),
        resolution: res,
        seed: dataset.seed,
        channel_count: CHANNELS.len(),
        channel_order: CHANNELS.iter().map(|c| c.to_string()).collect(),
        has_mask: dataset.samples.iter().map(|s| s.body_mask.is_some()).collect(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len(),
        sample_ids: dataset.samples.iter().map(|s| s.sample_id.clone()).collect(),
    };
    write_file(&blob_path, &blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(path, text.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_artifact(path)?;
    let loc = path.display().to_string();
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| {
        Error::format(
            format!("{loc} line {} column {}", e.line(), e.column()),
            format!("malformed dataset header: {e}"),
        )
    })?;
    if m.format != FORMAT {
        return Err(Error::format(loc, format!("unknown format `{}`", m.format)));
    }
    if m.channel_count != CHANNELS.len() || m.channel_order != CHANNELS {
        return Err(Error::format(loc, format!("unsupported channel layout {:?}", m.channel_order)));
    }
    if m.sample_ids.len() != m.count || m.has_mask.len() != m.count {
        return Err(Error::format(loc, "sample list length disagrees with count"));
    }
    let plane = m.resolution * m.resolution;
    let expected = m.count * CHANNELS.len() * plane * 4;
    let blob_path = path.with_file_name(&m.blob);
    let blob = read_artifact(&blob_path)?;
    if blob.len() != expected || m.blob_bytes != expected {
        return Err(Error::format(
            blob_path.display().to_string(),
            format!(
                "blob holds {} bytes but {} samples at {r}x{r} need {expected}",
                blob.len(),
                m.count,
                r = m.resolution
            ),
        ));
    }
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let samples = values
        .chunks_exact(3 * plane)
        .zip(m.sample_ids)
        .zip(m.has_mask)
        .map(|((chunk, id), has_mask)| PairedImage {
            sample_id: id,
            resolution: m.resolution,
            modality_a: chunk[..plane].to_vec(),
            modality_b: chunk[plane..2 * plane].to_vec(),
            body_mask: has_mask.then(|| chunk[2 * plane..].to_vec()),
        })
        .collect();
    Ok(Dataset {
        resolution: m.resolution,
        seed: m.seed,
        samples,
    })
}
