//! Run configuration, per-module seed derivation and the artifact-producing
//! stages behind the command-line driver.

mod compare;
mod report;
mod stages;

pub use compare::{compare, CompareOutcome, CompareRow, SummaryRow, STAT_METRICS};
pub use report::{pr_sweep, PrRow, SWEEP_PSI};
pub use stages::{augment, evaluate, hpo, invert, make_data, train_downstream, train_gan, AugmentSummary};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::DownstreamConfig;
use crate::error::{read_artifact, write_file, Error, Result};
use crate::gan::GanTrainConfig;
use crate::hpo::{SearchSpace, TpeSettings, DEFAULT_N_GEN};
use crate::inversion::InversionConfig;
use crate::policy::{PolicyConfig, PolicyKind, TransformSpec};

/// Overrides `output_dir` when set.
pub const OUTPUT_ENV: &str = "GANAUG_OUTPUT";

/// Modules that receive a derived seed.
pub const SEED_MODULES: [&str; 9] = [
    "synthdata",
    "split",
    "gan",
    "extractor",
    "policy",
    "downstream",
    "hpo",
    "eval",
    "report",
];

/// First 8 bytes (little-endian) of `SHA-256(master_le_bytes ‖ module)`,
/// shifted to 63 bits so it fits a TOML integer.
pub fn derive_seed(master: u64, module: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(module.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) >> 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub master: u64,
    pub modules: BTreeMap<String, u64>,
}

impl DerivedSeeds {
    pub fn get(&self, module: &str) -> u64 {
        *self
            .modules
            .get(module)
            .unwrap_or_else(|| panic!("`{module}` is not in SEED_MODULES"))
    }
}

/// Seeds for every module in [`SEED_MODULES`].
pub fn seed_everything(master: u64) -> DerivedSeeds {
    DerivedSeeds {
        master,
        modules: SEED_MODULES.iter().map(|m| (m.to_string(), derive_seed(master, m))).collect(),
    }
}

/// A policy as named on the command line. `latent-nodiv` is the latent
/// policy with every diversity weight zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyChoice {
    Kind(PolicyKind),
    LatentNoDiversity,
}

impl PolicyChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kind(k) => k.name(),
            Self::LatentNoDiversity => "latent-nodiv",
        }
    }

    fn needs_gan(self) -> bool {
        !matches!(self, Self::Kind(PolicyKind::None | PolicyKind::StandardDa))
    }

    fn needs_latents(self) -> bool {
        matches!(self, Self::Kind(PolicyKind::Latent) | Self::LatentNoDiversity)
    }
}

impl fmt::Display for PolicyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent-nodiv" => Ok(Self::LatentNoDiversity),
            other => other.parse().map(Self::Kind),
        }
    }
}

pub fn parse_policies(list: &str) -> Result<Vec<PolicyChoice>> {
    let policies: Vec<PolicyChoice> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if policies.is_empty() {
        return Err(Error::invalid("no policies given"));
    }
    for (i, p) in policies.iter().enumerate() {
        if policies[..i].contains(p) {
            return Err(Error::invalid(format!("policy `{p}` listed twice")));
        }
    }
    Ok(policies)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            resolution: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Bundled parameter set used when `config` is absent.
    pub preset: String,
    pub config: Option<PolicyConfig>,
    /// Truncation for the unconditional-sampling policy.
    pub psi: f64,
    /// Transform list for the classical policy, `name[:magnitude],...`.
    pub transforms: String,
    /// Threshold for the two comparison policies; defaults to the latent
    /// policy's `p_aug`.
    pub baseline_p_aug: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            preset: "mae".into(),
            config: None,
            psi: 1.0,
            transforms: "xflip,rotate:3,frac:0.05,deform:0.03".into(),
            baseline_p_aug: None,
        }
    }
}

impl PolicySection {
    pub fn policy_config(&self) -> Result<PolicyConfig> {
        match &self.config {
            Some(c) => {
                c.validate()?;
                Ok(c.clone())
            }
            None => PolicyConfig::preset(&self.preset),
        }
    }

    pub fn transform_spec(&self) -> Result<TransformSpec> {
        TransformSpec::parse(&self.transforms)
    }

    pub fn comparison_p_aug(&self) -> Result<f64> {
        match self.baseline_p_aug {
            Some(p) => Ok(p),
            None => Ok(self.policy_config()?.p_aug),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpoObjective {
    Mae,
    F1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoSection {
    pub objective: HpoObjective,
    pub n_gen: usize,
    pub tpe: TpeSettings,
    pub space: SearchSpace,
}

impl Default for HpoSection {
    fn default() -> Self {
        Self {
            objective: HpoObjective::Mae,
            n_gen: DEFAULT_N_GEN,
            tpe: TpeSettings::default(),
            space: SearchSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub policies: Vec<String>,
    pub seeds: usize,
    /// Significance level of the Friedman and Nemenyi tests.
    pub alpha: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            policies: ["none", "standard-da", "standard-sg2", "latent"].map(String::from).to_vec(),
            seeds: 5,
            alpha: 0.05,
        }
    }
}

/// The whole run in one TOML document. Unknown keys are rejected. Seed
/// fields inside sections are replaced by seeds derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub gan: GanTrainConfig,
    pub inversion: InversionConfig,
    pub policy: PolicySection,
    pub downstream: DownstreamConfig,
    pub hpo: HpoSection,
    pub compare: CompareSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            gan: GanTrainConfig::default(),
            inversion: InversionConfig::default(),
            policy: PolicySection::default(),
            downstream: DownstreamConfig::default(),
            hpo: HpoSection::default(),
            compare: CompareSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("run config", e.to_string()))
    }

    /// Applies [`OUTPUT_ENV`] when it is set and non-empty.
    pub fn with_env_output(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_samples < 10 {
            return Err(Error::invalid("data.n_samples must be at least 10"));
        }
        self.gan.validate()?;
        self.inversion.validate()?;
        self.downstream.validate()?;
        self.policy.policy_config()?;
        self.policy.transform_spec()?.validate()?;
        let p = self.policy.comparison_p_aug()?;
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&self.policy.psi) {
            return Err(Error::invalid("baseline_p_aug and psi must lie in [0, 1]"));
        }
        self.hpo.tpe.validate()?;
        self.hpo.space.validate()?;
        if self.compare.seeds == 0 {
            return Err(Error::invalid("compare.seeds must be positive"));
        }
        parse_policies(&self.compare.policies.join(","))?;
        Ok(())
    }

    /// Copy with every section seed set from `seeds`, as written next to
    /// each artifact.
    pub fn resolved(&self, seeds: &DerivedSeeds) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seeds.master;
        cfg.gan.seed = seeds.get("gan");
        cfg.downstream.seed = seeds.get("downstream");
        cfg.hpo.tpe.seed = seeds.get("hpo");
        let mut policy = self.policy.policy_config().unwrap_or_else(|_| PolicyConfig::default());
        policy.seed = seeds.get("policy");
        cfg.policy.config = Some(policy);
        cfg
    }
}

/// Writes `run.toml` (resolved configuration) and `seeds.json` into `dir`.
pub(crate) fn write_provenance(dir: &Path, cfg: &RunConfig, seeds: &DerivedSeeds) -> Result<()> {
    let resolved = cfg.resolved(seeds);
    write_file(&dir.join("run.toml"), resolved.to_toml()?.as_bytes())?;
    let json = serde_json::to_vec_pretty(seeds).map_err(|e| Error::format("seeds", e.to_string()))?;
    write_file(&dir.join("seeds.json"), &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = seed_everything(7);
        assert_eq!(a, seed_everything(7));
        assert_ne!(a.modules, seed_everything(8).modules);
        let mut values: Vec<u64> = a.modules.values().copied().collect();
        values.sort_unstable();
        values.dedup();
        assert_eq!(values.len(), SEED_MODULES.len());
    }

    #[test]
    fn policy_names_parse() {
        let p = parse_policies("baseline, standard-da,standard-sg2,latent,latent-nodiv").unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p[0], PolicyChoice::Kind(PolicyKind::None));
        assert_eq!(p[4].name(), "latent-nodiv");
        assert!(parse_policies("latent,latent").is_err());
        assert!(parse_policies("mixup").is_err());
        assert!(parse_policies("").is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[gan]\niters = 5").is_err());
        let partial = RunConfig::from_toml("seed = 3\n[data]\nresolution = 16").unwrap();
        assert_eq!((partial.seed, partial.data.resolution, partial.data.n_samples), (3, 16, 1000));
    }

    #[test]
    fn resolved_config_carries_derived_seeds() {
        let cfg = RunConfig::default();
        let seeds = seed_everything(11);
        let r = cfg.resolved(&seeds);
        assert_eq!(r.gan.seed, seeds.get("gan"));
        assert_eq!(r.policy.config.unwrap().seed, seeds.get("policy"));
    }
}
