use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{r1_graph, GanArch, GanModel, Trainable};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, NodeId, NumericsError, PixelShift, Tensor};
use crate::synthdata::PairedImage;

/// Largest integer translation used by discriminator augmentation.
pub const DISC_AUG_MAX_SHIFT: i32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_weight: f64,
    /// The R1 term is evaluated every `r1_interval` discriminator steps with
    /// its weight multiplied by the interval.
    pub r1_interval: usize,
    pub disc_aug_prob: f64,
    pub w_mean_samples: usize,
    /// Save an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iterations: 2000,
            lr_g: 0.0025,
            lr_d: 0.0025,
            r1_weight: 0.8192,
            r1_interval: 4,
            disc_aug_prob: 0.2,
            w_mean_samples: 10_000,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.r1_interval == 0 || self.w_mean_samples == 0 {
            return Err(Error::invalid("batch_size, iterations, r1_interval and w_mean_samples must be positive"));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.r1_weight >= 0.0) {
            return Err(Error::invalid("learning rates must be positive and r1_weight non-negative"));
        }
        if !(0.0..=1.0).contains(&self.disc_aug_prob) {
            return Err(Error::invalid(format!("disc_aug_prob must lie in [0, 1], got {}", self.disc_aug_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    /// R1 value when it was evaluated this iteration, else empty.
    pub r1: Option<f64>,
}

pub struct GanTrainOutcome {
    pub model: GanModel,
    pub log: Vec<GanLogRow>,
}

fn train_step(
    model: &mut GanModel,
    images: &[Tensor],
    cfg: &GanTrainConfig,
    it: usize,
    rng: &mut ChaCha8Rng,
    opt_d: &mut Adam,
    opt_g: &mut Adam,
) -> Result<GanLogRow> {
    let d = model.latent_dim();
    let n = cfg.batch_size;

    // Discriminator step.
    let batch: Vec<Tensor> = (0..n).map(|_| images[rng.random_range(0..images.len())].clone()).collect();
    let z = Tensor::randn(&[n, d], rng);
    let real_shifts = draw_shifts(rng, n, cfg.disc_aug_prob);
    let fake_shifts = draw_shifts(rng, n, cfg.disc_aug_prob);
    let real = {
        let mut tmp = Graph::new();
        let r = tmp.constant(Tensor::stack(&batch)?);
        let r = augment_node(&mut tmp, r, &real_shifts)?;
        tmp.value(r).clone()
    };
    let mut g = Graph::new();
    let p = model.bind(&mut g, Trainable::Discriminator)?;
    let xr = g.input("x_real", real)?;
    let zi = g.constant(z);
    let w = model.mapping_graph(&mut g, &p, zi)?;
    let fake = model.generator_graph(&mut g, &p, w)?;
    let fake = augment_node(&mut g, fake, &fake_shifts)?;
    let lr_real = model.discriminator_graph(&mut g, &p, xr)?;
    let lr_fake = model.discriminator_graph(&mut g, &p, fake)?;
    let l_real = softplus_mean(&mut g, lr_real, -1.0)?;
    let l_fake = softplus_mean(&mut g, lr_fake, 1.0)?;
    let mut d_loss = g.add(l_real, l_fake)?;
    let mut r1_value = None;
    if cfg.r1_weight > 0.0 && it.is_multiple_of(cfg.r1_interval) {
        let r1 = r1_graph(model, &mut g, &p, xr)?;
        r1_value = Some(g.scalar(r1)?);
        let weighted = g.scale(r1, cfg.r1_weight * cfg.r1_interval as f64)?;
        d_loss = g.add(d_loss, weighted)?;
    }
    let d_value = g.scalar(d_loss)?;
    let grads = p.gradients(&mut g, d_loss)?;
    opt_d.step(model.params_mut(), &grads)?;

    // Generator step.
    let z = Tensor::randn(&[n, d], rng);
    let shifts = draw_shifts(rng, n, cfg.disc_aug_prob);
    let mut g = Graph::new();
    let p = model.bind(&mut g, Trainable::MappingAndGenerator)?;
    let zi = g.constant(z);
    let w = model.mapping_graph(&mut g, &p, zi)?;
    let fake = model.generator_graph(&mut g, &p, w)?;
    let fake = augment_node(&mut g, fake, &shifts)?;
    let logits = model.discriminator_graph(&mut g, &p, fake)?;
    let g_loss = softplus_mean(&mut g, logits, -1.0)?;
    let g_value = g.scalar(g_loss)?;
    let grads = p.gradients(&mut g, g_loss)?;
    opt_g.step(model.params_mut(), &grads)?;

    Ok(GanLogRow {
        iteration: it,
        d_loss: d_value,
        g_loss: g_value,
        r1: r1_value,
    })
}

fn draw_shifts<R: Rng>(rng: &mut R, n: usize, prob: f64) -> Option<Vec<PixelShift>> {
    if prob <= 0.0 {
        return None;
    }
    let shifts: Vec<PixelShift> = (0..n)
        .map(|_| {
            if !rng.random_bool(prob) {
                PixelShift::default()
            } else if rng.random_bool(0.5) {
                PixelShift { flip: true, dx: 0, dy: 0 }
            } else {
                PixelShift {
                    flip: false,
                    dx: rng.random_range(-DISC_AUG_MAX_SHIFT..=DISC_AUG_MAX_SHIFT),
                    dy: rng.random_range(-DISC_AUG_MAX_SHIFT..=DISC_AUG_MAX_SHIFT),
                }
            }
        })
        .collect();
    shifts.iter().any(|s| *s != PixelShift::default()).then_some(shifts)
}

fn augment_node(g: &mut Graph, x: NodeId, shifts: &Option<Vec<PixelShift>>) -> Result<NodeId> {
    Ok(match shifts {
        Some(s) => g.pixel_shift(x, s)?,
        None => x,
    })
}

/// `mean(softplus(sign · logits))`.
fn softplus_mean(g: &mut Graph, logits: NodeId, sign: f64) -> Result<NodeId> {
    let s = g.scale(logits, sign)?;
    let s = g.softplus(s)?;
    Ok(g.mean(s)?)
}

/// Alternating non-saturating GAN training with R1 on real images.
///
/// With `out_dir`, writes `gan_train_log.csv` row by row, optional
/// intermediate checkpoints, and the final `gan.json`/`gan.bin`.
pub fn train_gan(
    train: &[PairedImage],
    arch: GanArch,
    cfg: &GanTrainConfig,
    out_dir: Option<&Path>,
) -> Result<GanTrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if let Some(s) = train.iter().find(|s| s.resolution != arch.resolution) {
        return Err(Error::invalid(format!(
            "sample {} has resolution {}, model expects {}",
            s.sample_id, s.resolution, arch.resolution
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GanModel::new(arch, rng.random())?;
    let images: Vec<Tensor> = train.iter().map(PairedImage::to_tensor).collect();
    let mut opt_d = Adam::new(cfg.lr_d)?;
    let mut opt_g = Adam::new(cfg.lr_g)?;

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("gan_train_log.csv");
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((csv::Writer::from_writer(file), path))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let row = train_step(&mut model, &images, cfg, it, &mut rng, &mut opt_d, &mut opt_g).map_err(|e| match e {
            Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss { stage: "gan_train", step: it },
            other => other,
        })?;
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(&row).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        log.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations {
                model.save(&dir.join(format!("gan_iter{:06}.json", it + 1)), checkpoint_info(cfg, it + 1))?;
            }
        }
    }

    let w_mean = model.estimate_w_mean(cfg.w_mean_samples, rng.random())?;
    model.set_w_mean(w_mean)?;
    if let Some(dir) = out_dir {
        model.save(&dir.join("gan.json"), checkpoint_info(cfg, cfg.iterations))?;
    }
    Ok(GanTrainOutcome { model, log })
}

fn checkpoint_info(cfg: &GanTrainConfig, iteration: usize) -> serde_json::Value {
    serde_json::json!({
        "iteration": iteration,
        "train_config": cfg,
        "w_mean_samples": cfg.w_mean_samples,
    })
}
