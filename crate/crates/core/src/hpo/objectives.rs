use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::downstream::{eval_translator, train_translator, DownstreamConfig};
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::inversion::LatentTable;
use crate::metrics::{f1, knn_precision_recall, FeatureExtractor, KNN_K};
use crate::numerics::Tensor;
use crate::policy::{latent_samples, Augmenter, PolicyConfig, ReferenceSet};
use crate::synthdata::{stack_images, PairedImage};

/// Generated images per F1 evaluation.
pub const DEFAULT_N_GEN: usize = 2000;

/// Everything an objective needs besides the configuration under test.
pub struct ObjectiveData<'a> {
    pub model: &'a GanModel,
    /// Two-channel extractor driving the policy and the F1 features.
    pub extractor: &'a FeatureExtractor,
    pub refs: &'a ReferenceSet,
    pub table: &'a LatentTable,
    pub train: &'a [PairedImage],
    pub validation: &'a [PairedImage],
    pub downstream: DownstreamConfig,
}

/// Validation masked MAE of a translator trained under the latent policy.
pub fn mae_objective(data: &ObjectiveData, cfg: &PolicyConfig, seed: u64) -> Result<f64> {
    let augmenter = Augmenter::latent(data.model, data.extractor, data.refs, data.table, cfg.clone())?;
    let dcfg = DownstreamConfig {
        seed,
        ..data.downstream.clone()
    };
    let outcome = train_translator(data.train, &augmenter, &dcfg, None)?;
    let eval_extractor = FeatureExtractor::new(1, seed);
    let (report, _) = eval_translator(&outcome.model, data.validation, &eval_extractor, "latent", seed)?;
    report.get("mae").ok_or_else(|| Error::invalid("report has no mae"))
}

/// F1 of the k-NN manifolds of `generated` against `real` in the feature
/// space of `extractor`.
pub fn f1_between(extractor: &FeatureExtractor, generated: &Tensor, real: &Tensor, k: usize) -> Result<f64> {
    let gen_features = extractor.embed(generated)?;
    let real_features = extractor.embed(real)?;
    let (precision, recall) = knn_precision_recall(&real_features, &gen_features, k)?;
    Ok(f1(precision, recall))
}

/// F1 between `n_gen` navigated samples and the validation images. The
/// keep-real threshold plays no part here.
pub fn f1_objective(data: &ObjectiveData, cfg: &PolicyConfig, n_gen: usize, seed: u64) -> Result<f64> {
    if n_gen < KNN_K + 1 {
        return Err(Error::invalid(format!("n_gen = {n_gen} is below k + 1 = {}", KNN_K + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated = latent_samples(data.model, data.extractor, data.refs, data.table, cfg, n_gen, &mut rng)?;
    let real = stack_images(data.validation)?;
    f1_between(data.extractor, &generated, &real, KNN_K)
}
