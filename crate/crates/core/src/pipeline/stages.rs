use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{seed_everything, write_provenance, DerivedSeeds, HpoObjective, PolicyChoice, RunConfig};
use crate::downstream::{eval_translator, train_translator, write_sample_csv, DownstreamConfig, SampleMetrics, TrainOutcome, TranslatorModel};
use crate::error::{read_artifact, write_file, Error, Result};
use crate::gan::{self, GanArch, GanModel};
use crate::hpo::{
    f1_objective, mae_objective, p_aug_grid, paug_grid, tpe_search, write_grid_csv, write_trial_log, Direction,
    ObjectiveData, SearchSpace,
};
use crate::inversion::{invert_dataset, LatentTable};
use crate::metrics::{FeatureExtractor, MetricReport};
use crate::policy::{Augmenter, PolicyConfig, PolicyKind, ReferenceSet};
use crate::synthdata::{load_dataset, make_dataset, save_dataset, split, Dataset, DatasetSplit, PairedImage};

/// Where one pipeline instance reads and writes. The dataset may live
/// elsewhere (shared by the repetitions of a comparison).
pub(crate) struct Workspace<'a> {
    pub cfg: &'a RunConfig,
    pub seeds: DerivedSeeds,
    pub root: PathBuf,
    pub data_root: PathBuf,
}

/// Trained GAN plus everything the latent policy needs.
pub(crate) struct LatentArtifacts {
    pub model: GanModel,
    pub extractor: FeatureExtractor,
    pub table: Option<LatentTable>,
    pub refs: Option<ReferenceSet>,
}

pub(crate) struct Loaded {
    pub dataset: Dataset,
    pub split: DatasetSplit,
}

impl Loaded {
    pub fn train(&self) -> Result<Vec<PairedImage>> {
        self.dataset.subset(&self.split.train)
    }
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Error::format(what, e.to_string()))
}

impl<'a> Workspace<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            seeds: seed_everything(cfg.seed),
            root: cfg.output_dir.clone(),
            data_root: cfg.output_dir.clone(),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data_root.join("data/dataset.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.data_root.join("data/split.json")
    }

    pub fn gan_path(&self) -> PathBuf {
        self.root.join("gan/gan.json")
    }

    pub fn latents_path(&self) -> PathBuf {
        self.root.join("inversion/latents.json")
    }

    pub fn dir(&self, stage: &str, policy: Option<PolicyChoice>) -> PathBuf {
        match policy {
            Some(p) => self.root.join(stage).join(p.name()),
            None => self.root.join(stage),
        }
    }

    fn provenance(&self, dir: &Path) -> Result<()> {
        write_provenance(dir, self.cfg, &self.seeds)
    }

    pub fn make_data(&self, data_seeds: &DerivedSeeds) -> Result<Dataset> {
        let d = &self.cfg.data;
        let dataset = make_dataset(d.n_samples, d.resolution, data_seeds.get("synthdata"))?;
        let sp = split(&dataset, data_seeds.get("split"))?;
        save_dataset(&dataset, &self.dataset_path())?;
        write_file(&self.split_path(), &to_json(&sp, "split")?)?;
        write_provenance(&self.data_root.join("data"), self.cfg, data_seeds)?;
        Ok(dataset)
    }

    pub fn load_data(&self) -> Result<Loaded> {
        let dataset = load_dataset(&self.dataset_path())?;
        let path = self.split_path();
        let split: DatasetSplit = serde_json::from_slice(&read_artifact(&path)?)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Ok(Loaded { dataset, split })
    }

    pub fn train_gan(&self) -> Result<GanModel> {
        let data = self.load_data()?;
        let train = data.train()?;
        let cfg = gan::GanTrainConfig {
            seed: self.seeds.get("gan"),
            ..self.cfg.gan.clone()
        };
        let dir = self.dir("gan", None);
        let outcome = gan::train_gan(&train, GanArch::for_resolution(data.dataset.resolution), &cfg, Some(&dir))?;
        self.provenance(&dir)?;
        Ok(outcome.model)
    }

    pub fn extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(2, self.seeds.get("extractor"))
    }

    pub fn invert(&self) -> Result<LatentTable> {
        let data = self.load_data()?;
        let model = GanModel::load(&self.gan_path())?;
        let table = invert_dataset(&model, &self.extractor(), &data.dataset, &data.split.train, &self.cfg.inversion)?;
        table.save(&self.latents_path())?;
        self.provenance(&self.dir("inversion", None))?;
        Ok(table)
    }

    /// Loads what `policy` needs; `None` for the policies without a GAN.
    pub fn latent_artifacts(&self, data: &Loaded, policy: PolicyChoice) -> Result<Option<LatentArtifacts>> {
        if !policy.needs_gan() {
            return Ok(None);
        }
        let model = GanModel::load(&self.gan_path())?;
        let extractor = self.extractor();
        let (table, refs) = if policy.needs_latents() {
            let table = LatentTable::load(&self.latents_path())?;
            let refs = ReferenceSet::from_samples(&data.train()?, &table, &extractor)?;
            (Some(table), Some(refs))
        } else {
            (None, None)
        };
        Ok(Some(LatentArtifacts { model, extractor, table, refs }))
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let mut cfg = self.cfg.policy.policy_config()?;
        cfg.seed = self.seeds.get("policy");
        Ok(cfg)
    }

    pub fn augmenter<'b>(&self, policy: PolicyChoice, arts: Option<&'b LatentArtifacts>) -> Result<Augmenter<'b>> {
        let section = &self.cfg.policy;
        let missing = || Error::invalid(format!("policy `{policy}` needs GAN artifacts"));
        match policy {
            PolicyChoice::Kind(PolicyKind::None) => Ok(Augmenter::none()),
            PolicyChoice::Kind(PolicyKind::StandardDa) => {
                Augmenter::standard_da(section.transform_spec()?, section.comparison_p_aug()?)
            }
            PolicyChoice::Kind(PolicyKind::StandardSg2) => {
                let a = arts.ok_or_else(missing)?;
                Augmenter::standard_sg2(&a.model, section.psi, section.comparison_p_aug()?)
            }
            PolicyChoice::Kind(PolicyKind::Latent) | PolicyChoice::LatentNoDiversity => {
                let a = arts.ok_or_else(missing)?;
                let (table, refs) = (a.table.as_ref().ok_or_else(missing)?, a.refs.as_ref().ok_or_else(missing)?);
                let mut cfg = self.policy_config()?;
                if policy == PolicyChoice::LatentNoDiversity {
                    cfg = cfg.without_diversity();
                }
                Augmenter::latent(&a.model, &a.extractor, refs, table, cfg)
            }
        }
    }

    pub fn downstream_config(&self) -> DownstreamConfig {
        DownstreamConfig {
            seed: self.seeds.get("downstream"),
            ..self.cfg.downstream.clone()
        }
    }

    pub fn train_downstream(&self, policy: PolicyChoice) -> Result<TrainOutcome> {
        let data = self.load_data()?;
        let arts = self.latent_artifacts(&data, policy)?;
        let augmenter = self.augmenter(policy, arts.as_ref())?;
        let dir = self.dir("downstream", Some(policy));
        let outcome = train_translator(&data.train()?, &augmenter, &self.downstream_config(), Some(&dir))?;
        self.provenance(&dir)?;
        Ok(outcome)
    }

    pub fn evaluate(&self, policy: PolicyChoice) -> Result<(MetricReport, Vec<SampleMetrics>)> {
        let data = self.load_data()?;
        let model = TranslatorModel::load(&self.dir("downstream", Some(policy)).join("translator.json"))?;
        let test = data.dataset.subset(&data.split.test)?;
        let eval_seed = self.seeds.get("eval");
        let extractor = FeatureExtractor::new(1, eval_seed);
        let (report, rows) = eval_translator(&model, &test, &extractor, policy.name(), self.seeds.master)?;
        let dir = self.dir("eval", Some(policy));
        write_file(&dir.join("metrics.json"), &to_json(&report, "metrics")?)?;
        write_sample_csv(&dir.join("per_sample.csv"), &rows)?;
        self.provenance(&dir)?;
        Ok((report, rows))
    }
}

pub fn make_data(cfg: &RunConfig) -> Result<Dataset> {
    let ws = Workspace::new(cfg);
    ws.make_data(&ws.seeds)
}

pub fn train_gan(cfg: &RunConfig) -> Result<GanModel> {
    Workspace::new(cfg).train_gan()
}

/// Inverts every training sample with the trained GAN.
pub fn invert(cfg: &RunConfig) -> Result<LatentTable> {
    Workspace::new(cfg).invert()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentSummary {
    pub policy: String,
    pub samples: usize,
    pub augmented: usize,
    pub output: PathBuf,
}

#[derive(Serialize)]
struct AugmentRow<'a> {
    sample_id: &'a str,
    augmented: bool,
}

/// One augmentation pass over the training split, in batches of the
/// downstream batch size; writes the resulting dataset and a per-sample
/// flag table.
pub fn augment(cfg: &RunConfig, policy: PolicyChoice) -> Result<AugmentSummary> {
    let ws = Workspace::new(cfg);
    let data = ws.load_data()?;
    let arts = ws.latent_artifacts(&data, policy)?;
    let augmenter = ws.augmenter(policy, arts.as_ref())?;
    let train = data.train()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ws.seeds.get("policy"));
    let mut out = Vec::with_capacity(train.len());
    for batch in train.chunks(cfg.downstream.batch_size) {
        out.extend(augmenter.augment_batch(batch, &mut rng)?);
    }
    let dir = ws.dir("augment", Some(policy));
    let flags: Vec<bool> = out.iter().zip(&train).map(|(a, b)| a != b).collect();
    let dataset = Dataset {
        resolution: data.dataset.resolution,
        seed: ws.seeds.get("policy"),
        samples: out,
    };
    save_dataset(&dataset, &dir.join("samples.json"))?;
    let path = dir.join("augmented.csv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for (s, &flag) in dataset.samples.iter().zip(&flags) {
        w.serialize(AugmentRow {
            sample_id: &s.sample_id,
            augmented: flag,
        })
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    ws.provenance(&dir)?;
    Ok(AugmentSummary {
        policy: policy.name().into(),
        samples: flags.len(),
        augmented: flags.iter().filter(|f| **f).count(),
        output: dir,
    })
}

pub fn train_downstream(cfg: &RunConfig, policy: PolicyChoice) -> Result<TrainOutcome> {
    Workspace::new(cfg).train_downstream(policy)
}

/// Scores the trained translator of `policy` on the test split.
pub fn evaluate(cfg: &RunConfig, policy: PolicyChoice) -> Result<MetricReport> {
    Workspace::new(cfg).evaluate(policy).map(|(report, _)| report)
}

/// Tree-structured search under the configured objective, followed by the
/// `p_aug` grid on validation MAE with the best configuration. Writes
/// `trials.csv`, `paug_grid.csv` and `best.toml`; returns the final
/// configuration.
pub fn hpo(cfg: &RunConfig) -> Result<PolicyConfig> {
    let ws = Workspace::new(cfg);
    let data = ws.load_data()?;
    let arts = ws
        .latent_artifacts(&data, PolicyChoice::Kind(PolicyKind::Latent))?
        .expect("latent policy loads artifacts");
    let train = data.train()?;
    let validation = data.dataset.subset(&data.split.validation)?;
    let objective_data = ObjectiveData {
        model: &arts.model,
        extractor: &arts.extractor,
        refs: arts.refs.as_ref().expect("latent artifacts"),
        table: arts.table.as_ref().expect("latent artifacts"),
        train: &train,
        validation: &validation,
        downstream: ws.downstream_config(),
    };
    let base = ws.policy_config()?;
    let section = &cfg.hpo;
    let settings = crate::hpo::TpeSettings {
        seed: ws.seeds.get("hpo"),
        ..section.tpe.clone()
    };
    let mae = |c: &PolicyConfig, seed: u64| mae_objective(&objective_data, c, seed);
    let outcome = match section.objective {
        HpoObjective::Mae => tpe_search(&section.space, &base, &settings, "mae", Direction::Minimize, mae)?,
        HpoObjective::F1 => {
            // The threshold only matters downstream; it is set by the grid.
            let space = SearchSpace {
                search_p_aug: false,
                ..section.space.clone()
            };
            let f1 = |c: &PolicyConfig, seed: u64| f1_objective(&objective_data, c, section.n_gen, seed);
            tpe_search(&space, &base, &settings, "f1", Direction::Maximize, f1)?
        }
    };
    let dir = ws.dir("hpo", None);
    write_trial_log(&dir.join("trials.csv"), &outcome.trials)?;
    let best = outcome
        .best()
        .ok_or_else(|| Error::invalid("every search trial failed; see trials.csv"))?
        .config
        .clone();
    let grid = paug_grid(&p_aug_grid(), &best, Direction::Minimize, settings.seed, mae);
    write_grid_csv(&dir.join("paug_grid.csv"), &grid.rows, "mae")?;
    let final_cfg = PolicyConfig {
        p_aug: grid.best_p_aug.unwrap_or(best.p_aug),
        ..best
    };
    let text = toml::to_string(&final_cfg).map_err(|e| Error::format("best config", e.to_string()))?;
    write_file(&dir.join("best.toml"), text.as_bytes())?;
    ws.provenance(&dir)?;
    Ok(final_cfg)
}
