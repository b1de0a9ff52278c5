use rand::Rng;

use super::PolicyConfig;
use crate::error::{Error, Result};
use crate::gan::{GanModel, Trainable};
use crate::inversion::LatentTable;
use crate::metrics::FeatureExtractor;
use crate::numerics::{AdamConfig, AdamState, Graph, NodeId, NumericsError, Tensor};
use crate::synthdata::{stack_images, PairedImage};

/// Training images with their inverted latents, aligned by row.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    ids: Vec<String>,
    images: Tensor,
    latents: Tensor,
    /// Whole-image extractor activations per layer, `[N, C_l, H_l, W_l]`.
    activations: Vec<Tensor>,
}

impl ReferenceSet {
    pub fn new(ids: Vec<String>, images: Tensor, latents: Tensor, extractor: &FeatureExtractor) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::invalid("reference set is empty"));
        }
        if images.ndim() != 4 || images.shape()[0] != n || latents.ndim() != 2 || latents.shape()[0] != n {
            return Err(Error::invalid(format!(
                "reference set of {n} ids needs [{n}, C, H, W] images and [{n}, d] latents, got {:?} and {:?}",
                images.shape(),
                latents.shape()
            )));
        }
        let activations = extractor.activations(&images)?;
        Ok(Self {
            ids,
            images,
            latents,
            activations,
        })
    }

    /// References for `samples`, latents looked up in `table`.
    pub fn from_samples(samples: &[PairedImage], table: &LatentTable, extractor: &FeatureExtractor) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("reference set is empty"));
        }
        let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
        let latents = table.rows(&ids)?;
        Self::new(ids, stack_images(samples)?, latents, extractor)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn latents(&self) -> &Tensor {
        &self.latents
    }
}

/// The four loss terms and their weighted total for one latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyTerms {
    pub total: f64,
    pub fidelity: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub latent: f64,
}

/// Square window `[y0, y0+size) x [x0, x0+size)` fed to the perceptual term.
#[derive(Clone, Copy, Debug)]
struct Patch {
    y0: usize,
    x0: usize,
    size: usize,
}

/// Centroid and spread of one reference subset for every term.
#[derive(Clone)]
struct TermStats {
    pixel: (Vec<f64>, f64),
    perceptual: Vec<(Vec<f64>, f64)>,
    latent: (Vec<f64>, f64),
}

/// Row `i` of a tensor viewed as `[N, m]`.
fn row(t: &Tensor, i: usize) -> &[f64] {
    let m = t.numel() / t.shape()[0];
    &t.data()[i * m..(i + 1) * m]
}

/// Mean of the rows and the mean squared distance of the rows to it.
fn centroid_spread<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, m: usize) -> (Vec<f64>, f64) {
    let mut c = vec![0.0; m];
    let mut count = 0usize;
    for r in rows.clone() {
        for (a, v) in c.iter_mut().zip(r) {
            *a += v;
        }
        count += 1;
    }
    for a in &mut c {
        *a /= count as f64;
    }
    let spread = rows
        .map(|r| r.iter().zip(&c).map(|(v, a)| (v - a) * (v - a)).sum::<f64>())
        .sum::<f64>()
        / count as f64;
    (c, spread)
}

fn crop_images(images: &Tensor, patch: Patch) -> Result<Tensor> {
    let s = images.shape();
    let (n, c, w) = (s[0], s[1], s[3]);
    let mut data = Vec::with_capacity(n * c * patch.size * patch.size);
    for plane in images.data().chunks(s[2] * w).take(n * c) {
        for y in patch.y0..patch.y0 + patch.size {
            data.extend_from_slice(&plane[y * w + patch.x0..y * w + patch.x0 + patch.size]);
        }
    }
    Ok(Tensor::new(vec![n, c, patch.size, patch.size], data)?)
}

impl ReferenceSet {
    fn stats(&self, idx: &[usize], patch: Option<Patch>, extractor: &FeatureExtractor) -> Result<TermStats> {
        let m_pix = self.images.numel() / self.len();
        let d = self.latents.shape()[1];
        let perceptual = match patch {
            None => self
                .activations
                .iter()
                .map(|a| centroid_spread(idx.iter().map(|&i| row(a, i)), a.numel() / self.len()))
                .collect(),
            Some(p) => {
                let picked: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| self.images.slice_leading(i, 1))
                    .collect::<std::result::Result<_, _>>()?;
                let crops = crop_images(&Tensor::concat_leading(&picked)?, p)?;
                extractor
                    .activations(&crops)?
                    .iter()
                    .map(|a| centroid_spread((0..idx.len()).map(|i| row(a, i)), a.numel() / idx.len()))
                    .collect()
            }
        };
        Ok(TermStats {
            pixel: centroid_spread(idx.iter().map(|&i| row(&self.images, i)), m_pix),
            perceptual,
            latent: centroid_spread(idx.iter().map(|&i| row(&self.latents, i)), d),
        })
    }
}

struct LossGraph {
    g: Graph,
    /// Per-sample total and the four terms (`None` when not built).
    total: NodeId,
    terms: [Option<NodeId>; 4],
    sum: NodeId,
    grad: NodeId,
}

fn stack_stats<'a>(items: impl Iterator<Item = &'a (Vec<f64>, f64)>, shape: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let mut data = Vec::new();
    let mut spread = Vec::new();
    for (c, s) in items {
        data.extend_from_slice(c);
        spread.push(*s);
    }
    let mut full = vec![spread.len()];
    full.extend_from_slice(shape);
    Ok((Tensor::new(full, data)?, spread))
}

/// Builds `Σ_b L(w_b)` for a batch of latents; every term is built when
/// `all_terms`, otherwise only those with a nonzero weight (plus the latent
/// term, which keeps the graph connected to `w`).
fn build(
    model: &GanModel,
    extractor: &FeatureExtractor,
    w0: &Tensor,
    stats: &[TermStats],
    patch: Option<Patch>,
    cfg: &PolicyConfig,
    all_terms: bool,
) -> Result<LossGraph> {
    let d = model.latent_dim();
    let r = model.resolution();
    let mut g = Graph::new();
    let p = model.bind(&mut g, Trainable::None)?;
    let w = g.input("w", w0.clone())?;
    let x = model.generator_graph(&mut g, &p, w)?;

    let (c, s) = stack_stats(stats.iter().map(|t| &t.latent), &[d])?;
    let lat = g.set_sq_dist(w, c, s)?;
    let mut total = g.scale(lat, -cfg.alpha_lat)?;
    let mut terms = [None, None, None, Some(lat)];

    if all_terms || cfg.alpha_pix > 0.0 {
        let (c, s) = stack_stats(stats.iter().map(|t| &t.pixel), &[crate::gan::IMAGE_CHANNELS, r, r])?;
        let pix = g.set_sq_dist(x, c, s)?;
        let weighted = g.scale(pix, cfg.alpha_pix)?;
        total = g.sub(total, weighted)?;
        terms[1] = Some(pix);
    }
    if all_terms || cfg.alpha_perc > 0.0 {
        let fx = extractor.bind(&mut g)?;
        let xp = match patch {
            Some(pt) => g.crop(x, pt.y0, pt.x0, pt.size, pt.size)?,
            None => x,
        };
        let mut perc = None;
        for (l, layer) in extractor.layer_outputs(&mut g, &fx, xp)?.into_iter().enumerate() {
            let shape = g.shape(layer)[1..].to_vec();
            let (c, s) = stack_stats(stats.iter().map(|t| &t.perceptual[l]), &shape)?;
            let dl = g.set_sq_dist(layer, c, s)?;
            perc = Some(match perc {
                None => dl,
                Some(acc) => g.add(acc, dl)?,
            });
        }
        let perc = perc.expect("extractor has layers");
        let weighted = g.scale(perc, cfg.alpha_perc)?;
        total = g.sub(total, weighted)?;
        terms[2] = Some(perc);
    }
    if all_terms || cfg.alpha_f > 0.0 {
        let logits = model.discriminator_graph(&mut g, &p, x)?;
        let neg = g.scale(logits, -1.0)?;
        let lf = g.softplus(neg)?;
        let weighted = g.scale(lf, cfg.alpha_f)?;
        total = g.add(total, weighted)?;
        terms[0] = Some(lf);
    }
    let sum = g.sum(total)?;
    let grad = g.grad(sum, &[w])?[0];
    Ok(LossGraph {
        g,
        total,
        terms,
        sum,
        grad,
    })
}

impl LossGraph {
    fn terms(&self) -> Vec<PolicyTerms> {
        let get = |id: Option<NodeId>, b: usize| id.map_or(0.0, |n| self.g.value(n).data()[b]);
        (0..self.g.value(self.total).numel())
            .map(|b| PolicyTerms {
                total: self.g.value(self.total).data()[b],
                fidelity: get(self.terms[0], b),
                pixel: get(self.terms[1], b),
                perceptual: get(self.terms[2], b),
                latent: get(self.terms[3], b),
            })
            .collect()
    }
}

fn check_batch(model: &GanModel, w: &Tensor) -> Result<()> {
    let d = model.latent_dim();
    if w.ndim() != 2 || w.shape()[1] != d {
        return Err(Error::invalid(format!("latents must have shape [B, {d}], got {:?}", w.shape())));
    }
    Ok(())
}

/// Terms of the policy loss for each row of `w` (`[B, d_w]`) against the
/// whole reference set, on whole images; also returns `∇_w Σ_b L(w_b)`.
pub fn policy_loss_batch(
    w: &Tensor,
    model: &GanModel,
    extractor: &FeatureExtractor,
    refs: &ReferenceSet,
    cfg: &PolicyConfig,
) -> Result<(Vec<PolicyTerms>, Tensor)> {
    cfg.validate()?;
    check_batch(model, w)?;
    let all: Vec<usize> = (0..refs.len()).collect();
    let stats = refs.stats(&all, None, extractor)?;
    let stats = vec![stats; w.shape()[0]];
    let lg = build(model, extractor, w, &stats, None, cfg, true)?;
    Ok((lg.terms(), lg.g.value(lg.grad).clone()))
}

/// `L(w) = α_f·L_f − (α_pix·L_pix + α_perc·L_perc + α_lat·L_lat)` for one
/// latent `w` (`[d_w]`) against the whole reference set.
pub fn policy_loss(
    w: &Tensor,
    model: &GanModel,
    extractor: &FeatureExtractor,
    refs: &ReferenceSet,
    cfg: &PolicyConfig,
) -> Result<PolicyTerms> {
    let d = model.latent_dim();
    if w.shape() != [d] {
        return Err(Error::invalid(format!("latent must have shape [{d}], got {:?}", w.shape())));
    }
    let (terms, _) = policy_loss_batch(&w.reshape(&[1, d])?, model, extractor, refs, cfg)?;
    Ok(terms[0])
}

/// `K` Adam steps on the policy loss from each row of `w_start`.
///
/// Every row draws its own reference subset (when `ref_subset_size` is
/// smaller than the set) from `rng`; one perceptual patch position is drawn
/// per call and shared by generated and reference images.
pub fn navigate<R: Rng + ?Sized>(
    w_start: &Tensor,
    model: &GanModel,
    extractor: &FeatureExtractor,
    refs: &ReferenceSet,
    cfg: &PolicyConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(model, w_start)?;
    if cfg.steps == 0 {
        return Ok(w_start.clone());
    }
    let b = w_start.shape()[0];
    let n = refs.len();
    let r = model.resolution();
    let patch = cfg.perceptual_patch.filter(|&p| p < r).map(|size| Patch {
        y0: rng.random_range(0..=r - size),
        x0: rng.random_range(0..=r - size),
        size,
    });
    let mut stats = Vec::with_capacity(b);
    for _ in 0..b {
        let idx: Vec<usize> = if cfg.ref_subset_size == 0 || cfg.ref_subset_size >= n {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(rng, n, cfg.ref_subset_size).into_vec();
            v.sort_unstable();
            v
        };
        stats.push(refs.stats(&idx, patch, extractor)?);
    }
    let mut lg = build(model, extractor, w_start, &stats, patch, cfg, false).map_err(|e| nonfinite(e, 0))?;
    let adam = AdamConfig::default();
    let mut state = AdamState::new(w_start.shape());
    let mut w = w_start.clone();
    for step in 0..cfg.steps {
        if step > 0 {
            lg.g.evaluate(lg.sum, &[("w", w.clone())]).map_err(|e| nonfinite(e, step))?;
        }
        let grad = lg.g.value(lg.grad).clone();
        state.step(&adam, &mut w, &grad, cfg.lr).map_err(|e| nonfinite(e, step))?;
    }
    Ok(w)
}

fn nonfinite(e: impl Into<Error>, step: usize) -> Error {
    match e.into() {
        Error::Numerics(NumericsError::NonFinite { .. }) => Error::NonFiniteLoss { stage: "navigation", step },
        other => other,
    }
}
