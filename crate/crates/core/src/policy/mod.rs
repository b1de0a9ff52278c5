//! Latent-space augmentation: the weighted fidelity/diversity loss, Adam
//! navigation from an inverted latent, the keep-real threshold rule, and the
//! two comparison policies (classical transforms and unconditional sampling).

mod augment;
mod loss;
mod transforms;

pub use augment::{apply_rule, latent_samples, standard_sg2, Augmenter, PolicyKind};
pub use loss::{navigate, policy_loss, policy_loss_batch, PolicyTerms, ReferenceSet};
pub use transforms::{standard_da, TransformOp, TransformSpec, TransformStep};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of reference images drawn per navigation call.
pub const DEFAULT_REF_SUBSET: usize = 64;

/// Omitted fields deserialize to neutral values (zero weights, no steps),
/// except `ref_subset_size`; `lr` and `p_aug` are required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub alpha_f: f64,
    #[serde(default)]
    pub alpha_pix: f64,
    #[serde(default)]
    pub alpha_perc: f64,
    #[serde(default)]
    pub alpha_lat: f64,
    /// Navigation steps `K`.
    #[serde(default)]
    pub steps: usize,
    /// Navigation learning rate `η`.
    pub lr: f64,
    /// Keep-real threshold: a draw `r ≥ p_aug` triggers augmentation.
    pub p_aug: f64,
    /// References drawn per call; 0 uses the whole set.
    #[serde(default = "default_ref_subset")]
    pub ref_subset_size: usize,
    /// Side of the square patch fed to the perceptual term; `None` uses
    /// whole images.
    #[serde(default)]
    pub perceptual_patch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_ref_subset() -> usize {
    DEFAULT_REF_SUBSET
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::preset("mae").expect("bundled preset parses")
    }
}

const PRESET_MAE: &str = include_str!("../../presets/mae.toml");
const PRESET_F1: &str = include_str!("../../presets/f1.toml");

/// Names accepted by [`PolicyConfig::preset`].
pub const PRESETS: [&str; 2] = ["mae", "f1"];

impl PolicyConfig {
    /// A bundled parameter set: `mae` or `f1`.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "mae" => PRESET_MAE,
            "f1" => PRESET_F1,
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset `{other}`, expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("policy config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_f, self.alpha_pix, self.alpha_perc, self.alpha_lat];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!("policy weights must be finite and non-negative, got {weights:?}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("navigation learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::invalid(format!("p_aug must lie in [0, 1], got {}", self.p_aug)));
        }
        if self.perceptual_patch == Some(0) {
            return Err(Error::invalid("perceptual_patch must be positive"));
        }
        Ok(())
    }

    /// Copy with every diversity weight set to zero.
    pub fn without_diversity(&self) -> Self {
        Self {
            alpha_pix: 0.0,
            alpha_perc: 0.0,
            alpha_lat: 0.0,
            ..self.clone()
        }
    }
}
