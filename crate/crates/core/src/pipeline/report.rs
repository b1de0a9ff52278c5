use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::stages::Workspace;
use super::{PolicyChoice, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{f1, knn_precision_recall, FeatureExtractor, KNN_K};
use crate::numerics::Tensor;
use crate::policy::{latent_samples, standard_sg2, PolicyKind};
use crate::synthdata::stack_images;

/// Truncation values of the unguided configurations.
pub const SWEEP_PSI: [f64; 4] = [0.0, 0.3, 0.7, 1.0];

/// Number of latent configurations drawn from the search space.
const SWEEP_LATENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrRow {
    /// `A`..`D` for the latent configurations, `E`..`H` for the truncation values.
    pub config: String,
    pub policy: String,
    pub psi: Option<f64>,
    /// `modality_a`, `modality_b` or `joint`.
    pub view: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Channel `c` of a `[N, 2, r, r]` tensor as `[N, 1, r, r]`.
fn channel(x: &Tensor, c: usize) -> Result<Tensor> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * plane);
    for chunk in x.data().chunks(2 * plane) {
        data.extend_from_slice(&chunk[c * plane..(c + 1) * plane]);
    }
    Ok(Tensor::new(vec![s[0], 1, s[2], s[3]], data)?)
}

struct Views {
    single: FeatureExtractor,
    joint: FeatureExtractor,
    real: [Vec<Vec<f64>>; 3],
}

impl Views {
    fn new(real: &Tensor, single: FeatureExtractor, joint: FeatureExtractor) -> Result<Self> {
        let real = [
            single.embed(&channel(real, 0)?)?,
            single.embed(&channel(real, 1)?)?,
            joint.embed(real)?,
        ];
        Ok(Self { single, joint, real })
    }

    fn rows(&self, generated: &Tensor, config: &str, policy: &str, psi: Option<f64>) -> Result<Vec<PrRow>> {
        let gen = [
            self.single.embed(&channel(generated, 0)?)?,
            self.single.embed(&channel(generated, 1)?)?,
            self.joint.embed(generated)?,
        ];
        ["modality_a", "modality_b", "joint"]
            .iter()
            .zip(self.real.iter().zip(&gen))
            .map(|(view, (real, gen))| {
                let (precision, recall) = knn_precision_recall(real, gen, KNN_K)?;
                Ok(PrRow {
                    config: config.into(),
                    policy: policy.into(),
                    psi,
                    view: (*view).into(),
                    precision,
                    recall,
                    f1: f1(precision, recall),
                })
            })
            .collect()
    }
}

/// Precision and recall of generated sets against the training images:
/// four latent configurations drawn from the search space and unguided
/// sampling at each truncation value of [`SWEEP_PSI`], per modality and
/// jointly. Writes `report/pr_sweep.csv`.
pub fn pr_sweep(cfg: &RunConfig) -> Result<Vec<PrRow>> {
    let ws = Workspace::new(cfg);
    let data = ws.load_data()?;
    let arts = ws
        .latent_artifacts(&data, PolicyChoice::Kind(PolicyKind::Latent))?
        .expect("latent policy loads artifacts");
    let (table, refs) = (arts.table.as_ref().expect("latents"), arts.refs.as_ref().expect("references"));
    let n = cfg.hpo.n_gen;
    if n < KNN_K + 1 {
        return Err(Error::invalid(format!("n_gen = {n} is below k + 1 = {}", KNN_K + 1)));
    }
    let real = stack_images(&data.train()?)?;
    let report_seed = ws.seeds.get("report");
    let views = Views::new(
        &real,
        FeatureExtractor::new(1, ws.seeds.get("eval")),
        FeatureExtractor::new(2, ws.seeds.get("extractor")),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(report_seed);
    let base = ws.policy_config()?;
    let mut rows = Vec::new();
    let mut label = b'A';
    for _ in 0..SWEEP_LATENT {
        let pc = cfg.hpo.space.sample(&base, &mut rng)?;
        let generated = latent_samples(&arts.model, &arts.extractor, refs, table, &pc, n, &mut rng)?;
        rows.extend(views.rows(&generated, &(label as char).to_string(), "latent", None)?);
        label += 1;
    }
    for psi in SWEEP_PSI {
        let generated = standard_sg2(&arts.model, &mut rng, psi, n)?;
        rows.extend(views.rows(&generated, &(label as char).to_string(), "standard-sg2", Some(psi))?);
        label += 1;
    }

    let path = ws.dir("report", None).join("pr_sweep.csv");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
