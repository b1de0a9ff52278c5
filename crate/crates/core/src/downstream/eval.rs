use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_modalities, TranslatorModel};
use crate::error::{Error, Result};
use crate::metrics::{image_metrics, FeatureExtractor, MetricReport};
use crate::numerics::Tensor;
use crate::synthdata::PairedImage;

/// One row of the per-sample metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub policy: String,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub perc: f64,
}

/// Scores `predictions` (`[N, 1, r, r]`, modality A) against the test
/// samples: masked MAE, unmasked SSIM and PSNR, and the perceptual distance
/// under a one-channel extractor.
pub fn evaluate_predictions(
    test: &[PairedImage],
    predictions: &Tensor,
    extractor: &FeatureExtractor,
    policy: &str,
    seed: u64,
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    if test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let r = test[0].resolution;
    if predictions.shape() != [test.len(), 1, r, r] {
        return Err(Error::invalid(format!(
            "predictions have shape {:?}, expected [{}, 1, {r}, {r}]",
            predictions.shape(),
            test.len()
        )));
    }
    let (_, targets) = split_modalities(test)?;
    let perc = extractor.perceptual_distances(&targets, predictions)?;
    let plane = r * r;
    let mut rows = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let mask = s
            .body_mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("test sample {} has no body mask", s.sample_id)))?;
        let pred = &predictions.data()[i * plane..(i + 1) * plane];
        let m = image_metrics(&s.modality_a, pred, mask, r)?;
        rows.push(SampleMetrics {
            sample_id: s.sample_id.clone(),
            policy: policy.to_string(),
            mae: m.mae,
            ssim: m.ssim,
            psnr: m.psnr,
            perc: perc[i],
        });
    }
    let n = rows.len() as f64;
    let mut report = MetricReport::new(policy, seed);
    report.insert("mae", rows.iter().map(|r| r.mae).sum::<f64>() / n)?;
    report.insert("ssim", rows.iter().map(|r| r.ssim).sum::<f64>() / n)?;
    report.insert("psnr", rows.iter().map(|r| r.psnr).sum::<f64>() / n)?;
    report.insert("perc", rows.iter().map(|r| r.perc).sum::<f64>() / n)?;
    report.insert("n", n)?;
    report.note("mae_scope", "body mask");
    report.note("ssim_psnr_scope", "whole image");
    Ok((report, rows))
}

/// Translates modality B of every test sample and scores the result.
pub fn eval_translator(
    model: &TranslatorModel,
    test: &[PairedImage],
    extractor: &FeatureExtractor,
    policy: &str,
    seed: u64,
) -> Result<(MetricReport, Vec<SampleMetrics>)> {
    if let Some(s) = test.iter().find(|s| s.resolution != model.arch.resolution) {
        return Err(Error::invalid(format!(
            "sample {} has resolution {}, translator expects {}",
            s.sample_id, s.resolution, model.arch.resolution
        )));
    }
    if test.is_empty() {
        return Err(Error::invalid("test split is empty"));
    }
    let (b, _) = split_modalities(test)?;
    let pred = model.translate(&b)?;
    evaluate_predictions(test, &pred, extractor, policy, seed)
}

pub fn write_sample_csv(path: &Path, rows: &[SampleMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
