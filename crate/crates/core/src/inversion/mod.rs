//! Optimization-based GAN inversion: recover `w*` whose generated image
//! matches a given real image.

mod table;

pub use table::LatentTable;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{GanModel, Trainable};
use crate::metrics::FeatureExtractor;
use crate::numerics::{AdamConfig, AdamState, Graph, NumericsError, Tensor};
use crate::synthdata::{stack_images, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub pixel_weight: f64,
    pub perceptual_weight: f64,
    /// Images optimized together. Results do not depend on it: every image
    /// has its own latent and the per-coordinate Adam update is separable.
    pub batch_size: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            pixel_weight: 1.0,
            perceptual_weight: 1.0,
            batch_size: 64,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("inversion steps and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("inversion learning rate must be positive, got {}", self.lr)));
        }
        if !(self.pixel_weight >= 0.0 && self.perceptual_weight >= 0.0) {
            return Err(Error::invalid("inversion loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    /// Best latent seen, `[d_w]`.
    pub w_star: Tensor,
    /// Loss at `w_star`.
    pub final_loss: f64,
    /// Loss at every evaluated iterate `w_0 .. w_{steps-1}`.
    pub trajectory: Vec<f64>,
}

impl InversionResult {
    /// Running minimum of the trajectory.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trajectory
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}

/// Inverts each image of `targets` (`[N, 2, r, r]`) by Adam on
/// `pixel_weight · MSE + perceptual_weight · d_perc`, starting from `init`
/// (`[N, d_w]`) or from `w̄` for every image.
///
/// The update after the last evaluated iterate is skipped, so the result is
/// always one of the evaluated points.
pub fn invert(
    model: &GanModel,
    extractor: &FeatureExtractor,
    targets: &Tensor,
    init: Option<&Tensor>,
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    cfg.validate()?;
    let r = model.resolution();
    let s = targets.shape();
    if s.len() != 4 || s[1..] != [crate::gan::IMAGE_CHANNELS, r, r] {
        return Err(Error::invalid(format!(
            "inversion targets must have shape [N, 2, {r}, {r}], got {s:?}"
        )));
    }
    let n = s[0];
    let d = model.latent_dim();
    let w0 = match init {
        Some(w) if w.shape() == [n, d] => w.clone(),
        Some(w) => {
            return Err(Error::invalid(format!("initial latents have shape {:?}, expected [{n}, {d}]", w.shape())));
        }
        None => {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(model.w_mean().data());
            }
            Tensor::new(vec![n, d], data)?
        }
    };

    // NaN in the targets already surfaces here, before the first step.
    let build = || -> Result<_> {
        let target_feats = extractor.activations(targets)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, Trainable::None)?;
        let fx = extractor.bind(&mut g)?;
        let w = g.input("w", w0.clone())?;
        let x = model.generator_graph(&mut g, &p, w)?;
        let pix = g.set_sq_dist(x, targets.clone(), vec![0.0; n])?;
        let mut per_sample = g.scale(pix, cfg.pixel_weight)?;
        for (layer, t) in extractor.layer_outputs(&mut g, &fx, x)?.into_iter().zip(target_feats) {
            let dl = g.set_sq_dist(layer, t, vec![0.0; n])?;
            let dl = g.scale(dl, cfg.perceptual_weight)?;
            per_sample = g.add(per_sample, dl)?;
        }
        // Summing keeps each latent's gradient equal to that of its own loss.
        let total = g.sum(per_sample)?;
        let grad = g.grad(total, &[w])?[0];
        Ok((g, total, per_sample, grad))
    };
    let (mut g, total, per_sample, grad) = build().map_err(|e| nonfinite(e, 0))?;

    let adam = AdamConfig::default();
    let mut state = AdamState::new(&[n, d]);
    let mut current = w0;
    let mut best_w = current.clone();
    let mut best = vec![f64::INFINITY; n];
    let mut trajectories = vec![Vec::with_capacity(cfg.steps); n];
    for step in 0..cfg.steps {
        if step > 0 {
            g.evaluate(total, &[("w", current.clone())]).map_err(|e| nonfinite(e, step))?;
        }
        let losses = g.value(per_sample).data().to_vec();
        if losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { stage: "inversion", step });
        }
        for (i, &l) in losses.iter().enumerate() {
            trajectories[i].push(l);
            if l < best[i] {
                best[i] = l;
                best_w.data_mut()[i * d..(i + 1) * d].copy_from_slice(&current.data()[i * d..(i + 1) * d]);
            }
        }
        if step + 1 < cfg.steps {
            let gw = g.value(grad).clone();
            state.step(&adam, &mut current, &gw, cfg.lr).map_err(|e| nonfinite(e, step))?;
        }
    }
    Ok((0..n)
        .map(|i| InversionResult {
            w_star: best_w.slice_leading(i, 1).and_then(|t| t.reshape(&[d])).expect("row of best_w"),
            final_loss: best[i],
            trajectory: std::mem::take(&mut trajectories[i]),
        })
        .collect())
}

fn nonfinite(e: impl Into<Error>, step: usize) -> Error {
    match e.into() {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss { stage: "inversion", step },
        other => other,
    }
}

/// Inverts the samples `ids` of `dataset` in batches of `cfg.batch_size`.
pub fn invert_dataset(
    model: &GanModel,
    extractor: &FeatureExtractor,
    dataset: &Dataset,
    ids: &[String],
    cfg: &InversionConfig,
) -> Result<LatentTable> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(Error::invalid("no samples to invert"));
    }
    let samples = dataset.subset(ids)?;
    let d = model.latent_dim();
    let mut latents = Vec::with_capacity(ids.len() * d);
    let mut losses = Vec::with_capacity(ids.len());
    for chunk in samples.chunks(cfg.batch_size) {
        let targets = stack_images(chunk)?;
        for res in invert(model, extractor, &targets, None, cfg)? {
            latents.extend_from_slice(res.w_star.data());
            losses.push(res.final_loss);
        }
    }
    let meta = serde_json::json!({
        "inversion": cfg,
        "init": "w_mean",
        "feature_extractor": FeatureExtractor::DESCRIPTION,
        "feature_seed": extractor.seed(),
    });
    LatentTable::new(ids.to_vec(), Tensor::new(vec![ids.len(), d], latents)?, losses, meta)
}
