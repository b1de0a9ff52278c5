//! Paired translation (modality B to modality A) trained under an
//! augmentation policy and evaluated inside the body mask.

mod eval;
mod model;

pub use eval::{eval_translator, evaluate_predictions, write_sample_csv, SampleMetrics};
pub use model::{TranslatorArch, TranslatorModel};

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Adam, BoundParams, Graph, NodeId, NumericsError, Tensor};
use crate::policy::Augmenter;
use crate::synthdata::PairedImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate for both networks; decays linearly over the second half.
    pub lr: f64,
    pub beta1: f64,
    /// Weight of the L1 term against the adversarial term.
    pub l1_weight: f64,
    pub base_channels: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 0.002,
            beta1: 0.5,
            l1_weight: 100.0,
            base_channels: 8,
            seed: 0,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.base_channels == 0 {
            return Err(Error::invalid("epochs, batch_size and base_channels must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.l1_weight >= 0.0) {
            return Err(Error::invalid("lr must be positive and l1_weight non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid(format!("beta1 must lie in [0, 1), got {}", self.beta1)));
        }
        Ok(())
    }

    /// First epoch of the linear decay.
    pub fn decay_start(&self) -> usize {
        self.epochs / 2
    }

    /// Rate used during `epoch` (0-based). Constant for the first half, then
    /// falls linearly, staying positive in the last epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let start = self.decay_start();
        if epoch < start {
            return self.lr;
        }
        let span = (self.epochs - start + 1) as f64;
        self.lr * (1.0 - (epoch - start + 1) as f64 / span)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l1: f64,
    pub augmented: usize,
}

pub struct TrainOutcome {
    pub model: TranslatorModel,
    pub log: Vec<EpochRow>,
}

/// Splits samples into `[N, 1, r, r]` tensors of modality B (input) and A (target).
pub fn split_modalities(samples: &[PairedImage]) -> Result<(Tensor, Tensor)> {
    let r = samples.first().map(|s| s.resolution).unwrap_or(0);
    let mut b = Vec::with_capacity(samples.len() * r * r);
    let mut a = Vec::with_capacity(samples.len() * r * r);
    for s in samples {
        if s.resolution != r {
            return Err(Error::invalid("samples have mixed resolutions"));
        }
        b.extend_from_slice(&s.modality_b);
        a.extend_from_slice(&s.modality_a);
    }
    let shape = vec![samples.len(), 1, r, r];
    Ok((Tensor::new(shape.clone(), b)?, Tensor::new(shape, a)?))
}

fn softplus_mean(g: &mut Graph, logits: NodeId, sign: f64) -> Result<NodeId> {
    let s = g.scale(logits, sign)?;
    let s = g.softplus(s)?;
    Ok(g.mean(s)?)
}

fn disc_loss(model: &TranslatorModel, g: &mut Graph, p: &BoundParams, b: NodeId, a: NodeId) -> Result<NodeId> {
    let fake = model.generator_graph(g, p, b)?;
    let real_logits = model.discriminator_graph(g, p, b, a)?;
    let fake_logits = model.discriminator_graph(g, p, b, fake)?;
    let l_real = softplus_mean(g, real_logits, -1.0)?;
    let l_fake = softplus_mean(g, fake_logits, 1.0)?;
    Ok(g.add(l_real, l_fake)?)
}

/// `(adversarial, L1, adversarial + l1_weight·L1)`.
fn gen_loss(
    model: &TranslatorModel,
    g: &mut Graph,
    p: &BoundParams,
    b: NodeId,
    a: NodeId,
    l1_weight: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let fake = model.generator_graph(g, p, b)?;
    let logits = model.discriminator_graph(g, p, b, fake)?;
    let adv = softplus_mean(g, logits, -1.0)?;
    let diff = g.sub(fake, a)?;
    let diff = g.abs(diff)?;
    let l1 = g.mean(diff)?;
    let weighted = g.scale(l1, l1_weight)?;
    let total = g.add(adv, weighted)?;
    Ok((adv, l1, total))
}

/// Discriminator and generator objectives for one batch on a caller-owned
/// graph, with every translator parameter bound as trainable. `b` and `a`
/// are `[N, 1, r, r]`.
pub fn loss_graph(
    model: &TranslatorModel,
    g: &mut Graph,
    b: NodeId,
    a: NodeId,
    l1_weight: f64,
) -> Result<(BoundParams, NodeId, NodeId)> {
    let p = model.bind(g, model::Part::All)?;
    let d = disc_loss(model, g, &p, b, a)?;
    let (_, _, gl) = gen_loss(model, g, &p, b, a, l1_weight)?;
    Ok((p, d, gl))
}

fn step(
    model: &mut TranslatorModel,
    cfg: &DownstreamConfig,
    b: &Tensor,
    a: &Tensor,
    opt_d: &mut Adam,
    opt_g: &mut Adam,
) -> Result<(f64, f64, f64)> {
    // Discriminator: real pairs against pairs with the current prediction.
    let mut g = Graph::new();
    let p = model.bind(&mut g, model::Part::Discriminator)?;
    let bi = g.constant(b.clone());
    let ai = g.constant(a.clone());
    let d_loss = disc_loss(model, &mut g, &p, bi, ai)?;
    let d_value = g.scalar(d_loss)?;
    let grads = p.gradients(&mut g, d_loss)?;
    opt_d.step(model.params_mut(), &grads)?;

    // Generator: fool the updated discriminator and match the target.
    let mut g = Graph::new();
    let p = model.bind(&mut g, model::Part::Generator)?;
    let bi = g.constant(b.clone());
    let ai = g.constant(a.clone());
    let (adv, l1, loss) = gen_loss(model, &mut g, &p, bi, ai, cfg.l1_weight)?;
    let (adv_value, l1_value) = (g.scalar(adv)?, g.scalar(l1)?);
    let grads = p.gradients(&mut g, loss)?;
    opt_g.step(model.params_mut(), &grads)?;
    Ok((d_value, adv_value, l1_value))
}

/// Adversarial + L1 training of B→A translation. Every batch passes through
/// `augmenter` before use; the augmentation stream is separate from the
/// initialization and shuffling streams, so all policies see the same
/// initial weights and batch order under one seed.
pub fn train_translator(
    train: &[PairedImage],
    augmenter: &Augmenter,
    cfg: &DownstreamConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::invalid("training split is empty"))?;
    let arch = TranslatorArch {
        resolution: first.resolution,
        base_channels: cfg.base_channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TranslatorModel::new(arch, rng.random())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut opt_d = Adam::new(cfg.lr)?;
    let mut opt_g = Adam::new(cfg.lr)?;
    opt_d.config.beta1 = cfg.beta1;
    opt_g.config.beta1 = cfg.beta1;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt_d.set_lr(lr)?;
        opt_g.set_lr(lr)?;
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        let mut augmented = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairedImage> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch_aug = augmenter.augment_batch(&batch, &mut aug_rng)?;
            augmented += batch_aug.iter().zip(&batch).filter(|(x, y)| x != y).count();
            let (b, a) = split_modalities(&batch_aug)?;
            let (d, adv, l1) = step(&mut model, cfg, &b, &a, &mut opt_d, &mut opt_g).map_err(|e| match e {
                Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss {
                    stage: "downstream",
                    step: iteration,
                },
                other => other,
            })?;
            sums = (sums.0 + d, sums.1 + adv, sums.2 + l1);
            batches += 1;
            iteration += 1;
        }
        let k = batches as f64;
        log.push(EpochRow {
            epoch,
            lr,
            d_loss: sums.0 / k,
            g_adv: sums.1 / k,
            l1: sums.2 / k,
            augmented,
        });
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let info = serde_json::json!({ "config": cfg, "policy": augmenter.kind().name() });
        model.save(&dir.join("translator.json"), info)?;
        let path = dir.join("translator_log.csv");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for row in &log {
            w.serialize(row).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_decays_over_second_half() {
        let cfg = DownstreamConfig::default();
        assert_eq!(cfg.decay_start(), 20);
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert_eq!(cfg.lr_at(19), cfg.lr);
        let tail: Vec<f64> = (20..40).map(|e| cfg.lr_at(e)).collect();
        assert!(tail.windows(2).all(|p| p[1] < p[0]));
        assert!(tail[0] < cfg.lr && tail[19] > 0.0);
        assert!((tail[19] - cfg.lr / 21.0).abs() < 1e-15);
    }
}
