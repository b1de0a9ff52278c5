//! Generative-quality, image-fidelity and statistical metrics.

mod features;
mod frechet;
mod image;
mod manifold;
mod stats;

pub use features::FeatureExtractor;
pub use frechet::{frechet_distance, FrechetResult, FRECHET_EPS};
pub use image::{image_metrics, masked_mae, psnr, ssim, ImageMetrics, PSNR_CAP_DB, SSIM_WINDOW};
pub use manifold::{f1, knn_precision_recall};
pub use stats::{
    critical_difference, friedman, mid_ranks, nemenyi, nemenyi_q, nemenyi_signs, FriedmanResult,
    NemenyiResult,
};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighbourhood size for the k-NN manifolds.
pub const KNN_K: usize = 3;

/// Keys a [`MetricReport`] may carry.
pub const METRIC_KEYS: [&str; 10] = [
    "mae",
    "ssim",
    "psnr",
    "perc",
    "precision",
    "recall",
    "f1",
    "frechet",
    "throughput_s",
    "n",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(policy: impl Into<String>, seed: u64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("feature_extractor".into(), FeatureExtractor::DESCRIPTION.into());
        Self {
            policy: policy.into(),
            seed,
            values: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, key: &str, value: f64) -> Result<()> {
        if !METRIC_KEYS.contains(&key) {
            return Err(Error::invalid(format!("unknown metric key `{key}`")));
        }
        if !value.is_finite() {
            return Err(Error::invalid(format!("metric `{key}` is not finite: {value}")));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }
}

/// Mean wall-clock seconds per call of `f` over `batches` timed calls after
/// `warmup` untimed ones.
pub fn throughput(warmup: usize, batches: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    if batches == 0 {
        return Err(Error::invalid("throughput needs at least one timed batch"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let start = Instant::now();
    for _ in 0..batches {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / batches as f64)
}
