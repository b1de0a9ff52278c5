use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{navigate, ReferenceSet};
use super::transforms::{standard_da, TransformSpec};
use super::PolicyConfig;
use crate::error::{Error, Result};
use crate::gan::{truncate, GanModel};
use crate::inversion::LatentTable;
use crate::metrics::FeatureExtractor;
use crate::numerics::Tensor;
use crate::synthdata::PairedImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Real samples only.
    None,
    /// Classical geometric transforms.
    StandardDa,
    /// Unconditional GAN samples with truncation.
    StandardSg2,
    /// Navigation from inverted latents.
    Latent,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [Self::None, Self::StandardDa, Self::StandardSg2, Self::Latent];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::StandardDa => "standard-da",
            Self::StandardSg2 => "standard-sg2",
            Self::Latent => "latent",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Self::None),
            "standard-da" => Ok(Self::StandardDa),
            "standard-sg2" => Ok(Self::StandardSg2),
            "latent" => Ok(Self::Latent),
            other => Err(Error::invalid(format!(
                "unknown policy `{other}`, expected none, standard-da, standard-sg2 or latent"
            ))),
        }
    }
}

/// True when the sample should be replaced: a uniform draw in `[0, 1)` at
/// or above `p_aug`. `p_aug = 1` never augments, `p_aug = 0` always does.
pub fn apply_rule<R: Rng + ?Sized>(p_aug: f64, rng: &mut R) -> bool {
    rng.random::<f64>() >= p_aug
}

/// `n` images `G(w̄ + ψ (F(z) − w̄))` with `z ~ N(0, I)`, shape `[n, 2, r, r]`.
pub fn standard_sg2<R: Rng + ?Sized>(model: &GanModel, rng: &mut R, psi: f64, n: usize) -> Result<Tensor> {
    let z = Tensor::randn(&[n, model.latent_dim()], rng);
    let w = truncate(&model.mapping(&z)?, model.w_mean(), psi)?;
    model.generate(&w)
}

/// Rows navigated per call in [`latent_samples`].
const SAMPLE_CHUNK: usize = 64;

/// `n` navigated images `G(w̃)`, `[n, 2, r, r]`, each started from the
/// inverted latent of a source drawn uniformly (with replacement) from
/// `table`. The keep-real rule is not applied.
pub fn latent_samples<R: Rng + ?Sized>(
    model: &GanModel,
    extractor: &FeatureExtractor,
    refs: &ReferenceSet,
    table: &LatentTable,
    cfg: &PolicyConfig,
    n: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if table.is_empty() {
        return Err(Error::invalid("latent table is empty"));
    }
    let sources: Vec<String> = (0..n)
        .map(|_| table.ids()[rng.random_range(0..table.len())].clone())
        .collect();
    let mut parts = Vec::with_capacity(n.div_ceil(SAMPLE_CHUNK));
    for ids in sources.chunks(SAMPLE_CHUNK) {
        let w = navigate(&table.rows(ids)?, model, extractor, refs, cfg, rng)?;
        parts.push(model.generate(&w)?);
    }
    Ok(Tensor::concat_leading(&parts)?)
}

/// Replaces each sample of a batch with an augmented one according to the
/// keep-real rule.
pub struct Augmenter<'a> {
    kind: PolicyKind,
    p_aug: f64,
    spec: TransformSpec,
    psi: f64,
    policy: Option<PolicyConfig>,
    model: Option<&'a GanModel>,
    extractor: Option<&'a FeatureExtractor>,
    refs: Option<&'a ReferenceSet>,
    table: Option<&'a LatentTable>,
}

fn check_p_aug(p_aug: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p_aug) {
        Ok(())
    } else {
        Err(Error::invalid(format!("p_aug must lie in [0, 1], got {p_aug}")))
    }
}

impl<'a> Augmenter<'a> {
    pub fn none() -> Self {
        Self {
            kind: PolicyKind::None,
            p_aug: 1.0,
            spec: TransformSpec(Vec::new()),
            psi: 1.0,
            policy: None,
            model: None,
            extractor: None,
            refs: None,
            table: None,
        }
    }

    pub fn standard_da(spec: TransformSpec, p_aug: f64) -> Result<Self> {
        check_p_aug(p_aug)?;
        spec.validate()?;
        Ok(Self {
            kind: PolicyKind::StandardDa,
            p_aug,
            spec,
            ..Self::none()
        })
    }

    pub fn standard_sg2(model: &'a GanModel, psi: f64, p_aug: f64) -> Result<Self> {
        check_p_aug(p_aug)?;
        if !(0.0..=1.0).contains(&psi) {
            return Err(Error::invalid(format!("truncation ψ must lie in [0, 1], got {psi}")));
        }
        Ok(Self {
            kind: PolicyKind::StandardSg2,
            p_aug,
            psi,
            model: Some(model),
            ..Self::none()
        })
    }

    /// Latent navigation; `p_aug` comes from `cfg`.
    pub fn latent(
        model: &'a GanModel,
        extractor: &'a FeatureExtractor,
        refs: &'a ReferenceSet,
        table: &'a LatentTable,
        cfg: PolicyConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if refs.is_empty() {
            return Err(Error::invalid("latent policy needs a non-empty reference set"));
        }
        if table.latent_dim() != model.latent_dim() {
            return Err(Error::invalid(format!(
                "latent table has dimension {}, model expects {}",
                table.latent_dim(),
                model.latent_dim()
            )));
        }
        Ok(Self {
            kind: PolicyKind::Latent,
            p_aug: cfg.p_aug,
            policy: Some(cfg),
            model: Some(model),
            extractor: Some(extractor),
            refs: Some(refs),
            table: Some(table),
            ..Self::none()
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn p_aug(&self) -> f64 {
        self.p_aug
    }

    /// Draws the rule for every sample first, then replaces the chosen ones.
    /// Generated samples keep the source id and carry no body mask.
    pub fn augment_batch<R: Rng + ?Sized>(&self, batch: &[PairedImage], rng: &mut R) -> Result<Vec<PairedImage>> {
        if self.kind == PolicyKind::None {
            return Ok(batch.to_vec());
        }
        let chosen: Vec<usize> = (0..batch.len()).filter(|_| apply_rule(self.p_aug, rng)).collect();
        let mut out = batch.to_vec();
        if chosen.is_empty() {
            return Ok(out);
        }
        match self.kind {
            PolicyKind::None => {}
            PolicyKind::StandardDa => {
                for &i in &chosen {
                    out[i] = standard_da(&batch[i], &self.spec, rng).map_err(|e| failure(&batch[i], e))?;
                }
            }
            PolicyKind::StandardSg2 => {
                let model = self.model.expect("sg2 augmenter has a model");
                let images = standard_sg2(model, rng, self.psi, chosen.len()).map_err(|e| failure(&batch[chosen[0]], e))?;
                for (k, &i) in chosen.iter().enumerate() {
                    out[i] = PairedImage::from_batch(&images, k, batch[i].sample_id.clone())?;
                }
            }
            PolicyKind::Latent => {
                let ids: Vec<String> = chosen.iter().map(|&i| batch[i].sample_id.clone()).collect();
                let images = self.navigate_rows(&ids, rng)?;
                for (k, &i) in chosen.iter().enumerate() {
                    out[i] = PairedImage::from_batch(&images, k, batch[i].sample_id.clone())?;
                }
            }
        }
        Ok(out)
    }

    /// `G(w̃)` for the stored latents of `ids`.
    fn navigate_rows<R: Rng + ?Sized>(&self, ids: &[String], rng: &mut R) -> Result<Tensor> {
        let (model, extractor, refs, table, cfg) = (
            self.model.expect("latent augmenter has a model"),
            self.extractor.expect("latent augmenter has an extractor"),
            self.refs.expect("latent augmenter has references"),
            self.table.expect("latent augmenter has a table"),
            self.policy.as_ref().expect("latent augmenter has a config"),
        );
        let w_star = table.rows(ids)?;
        let result = navigate(&w_star, model, extractor, refs, cfg, rng).and_then(|w| model.generate(&w));
        result.map_err(|e| {
            // Rows are independent, so the first row that fails alone is the culprit.
            let d = table.latent_dim();
            let culprit = ids
                .iter()
                .zip(w_star.data().chunks(d))
                .find(|(_, row)| {
                    let w = Tensor::new(vec![1, d], row.to_vec()).expect("row shape");
                    navigate(&w, model, extractor, refs, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).is_err()
                })
                .map(|(id, _)| id.clone())
                .unwrap_or_else(|| ids[0].clone());
            Error::PolicyFailure {
                sample_id: culprit,
                source: Box::new(e),
            }
        })
    }
}

fn failure(sample: &PairedImage, e: Error) -> Error {
    Error::PolicyFailure {
        sample_id: sample.sample_id.clone(),
        source: Box::new(e),
    }
}
