//! Procedural paired-modality phantoms standing in for paired CT/MRI slices.
//!
//! Modality A plays the CT role (bone bright, fluid near soft tissue) and
//! modality B the MRI role (bone dark, fluid and fat bright). Both are
//! rendered from one shared geometry.

mod io;
mod phantom;

pub use io::{load_dataset, save_dataset};
pub use phantom::make_dataset;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MIN_RESOLUTION: usize = 16;

/// One paired sample. Rasters are row-major `resolution x resolution`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedImage {
    pub sample_id: String,
    pub resolution: usize,
    pub modality_a: Vec<f64>,
    pub modality_b: Vec<f64>,
    /// Body mask with values in {0, 1}; generated samples have none.
    pub body_mask: Option<Vec<f64>>,
}

impl PairedImage {
    /// The two modalities as a `[2, r, r]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.modality_a.len());
        data.extend_from_slice(&self.modality_a);
        data.extend_from_slice(&self.modality_b);
        Tensor::new(vec![2, self.resolution, self.resolution], data).expect("consistent raster sizes")
    }

    /// Builds an unmasked sample from sample `index` of a `[N, 2, r, r]` tensor.
    pub fn from_batch(batch: &Tensor, index: usize, sample_id: String) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 2 || s[2] != s[3] || index >= s[0] {
            return Err(Error::invalid(format!("cannot take sample {index} from batch of shape {s:?}")));
        }
        let plane = s[2] * s[3];
        let base = index * 2 * plane;
        Ok(Self {
            sample_id,
            resolution: s[2],
            modality_a: batch.data()[base..base + plane].to_vec(),
            modality_b: batch.data()[base + plane..base + 2 * plane].to_vec(),
            body_mask: None,
        })
    }

    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// Stacks samples into a `[N, 2, r, r]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a PairedImage>) -> Result<Tensor> {
    let items: Vec<Tensor> = images.into_iter().map(PairedImage::to_tensor).collect();
    Ok(Tensor::stack(&items)?)
}

/// A generated dataset with its generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub seed: u64,
    pub samples: Vec<PairedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&PairedImage> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// The samples named in `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<PairedImage>> {
        let index: std::collections::HashMap<&str, &PairedImage> =
            self.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let mut missing = Vec::new();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            match index.get(id.as_str()) {
                Some(s) => out.push((*s).clone()),
                None => missing.push(id.clone()),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingSamples(missing))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Shuffled 70/20/10 hold-out split.
pub fn split(dataset: &Dataset, seed: u64) -> Result<DatasetSplit> {
    let n = dataset.len();
    if n < 10 {
        return Err(Error::invalid(format!("a split needs at least 10 samples, got {n}")));
    }
    let mut ids: Vec<String> = dataset.samples.iter().map(|s| s.sample_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        validation,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        for (n, sizes) in [(100, (70, 20, 10)), (10, (7, 2, 1)), (33, (23, 7, 3))] {
            let ds = make_dataset(n, 16, 1).unwrap();
            let s = split(&ds, 4).unwrap();
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), sizes);
        }
        assert!(split(&make_dataset(9, 16, 1).unwrap(), 0).is_err());
    }
}
