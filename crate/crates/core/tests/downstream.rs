mod common;

use common::{check_gradients, toy};
use ganaug::downstream::{
    eval_translator, evaluate_predictions, loss_graph, split_modalities, train_translator, write_sample_csv,
    DownstreamConfig, TranslatorArch, TranslatorModel,
};
use ganaug::inversion::{invert_dataset, InversionConfig, LatentTable};
use ganaug::metrics::{FeatureExtractor, PSNR_CAP_DB};
use ganaug::numerics::{Graph, Tensor};
use ganaug::policy::{Augmenter, PolicyConfig, ReferenceSet, TransformSpec};
use ganaug::synthdata::{make_dataset, PairedImage};
use ganaug::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(n: usize, seed: u64) -> Vec<PairedImage> {
    make_dataset(n, 16, seed).unwrap().samples
}

fn quick(epochs: usize) -> DownstreamConfig {
    DownstreamConfig {
        epochs,
        batch_size: 8,
        base_channels: 4,
        seed: 3,
        ..DownstreamConfig::default()
    }
}

#[test]
fn oracle_predictions_score_perfectly() {
    let test = samples(6, 1);
    let (_, a) = split_modalities(&test).unwrap();
    let fx = FeatureExtractor::new(1, 0);
    let (report, rows) = evaluate_predictions(&test, &a, &fx, "oracle", 0).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(report.get("mae"), Some(0.0));
    assert_eq!(report.get("psnr"), Some(PSNR_CAP_DB));
    assert!((report.get("ssim").unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report.get("perc"), Some(0.0));
    assert_eq!(report.get("n"), Some(6.0));
}

#[test]
fn constant_prediction_matches_direct_masked_mae() {
    let test = samples(5, 2);
    let pred = Tensor::full(&[5, 1, 16, 16], 0.5);
    let fx = FeatureExtractor::new(1, 0);
    let (report, rows) = evaluate_predictions(&test, &pred, &fx, "const", 0).unwrap();
    for (s, row) in test.iter().zip(&rows) {
        let mask = s.body_mask.as_ref().unwrap();
        let inside: Vec<f64> = s
            .modality_a
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m == 1.0)
            .map(|(a, _)| (a - 0.5).abs())
            .collect();
        let expected = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((row.mae - expected).abs() < 1e-12);
        assert_eq!(row.sample_id, s.sample_id);
        assert_eq!(row.policy, "const");
    }
    let mean = rows.iter().map(|r| r.mae).sum::<f64>() / 5.0;
    assert!((report.get("mae").unwrap() - mean).abs() < 1e-15);
}

#[test]
fn evaluation_rejects_bad_inputs() {
    let mut test = samples(3, 3);
    let fx = FeatureExtractor::new(1, 0);
    assert!(evaluate_predictions(&test, &Tensor::zeros(&[2, 1, 16, 16]), &fx, "x", 0).is_err());
    test[1].body_mask = None;
    assert!(evaluate_predictions(&test, &Tensor::zeros(&[3, 1, 16, 16]), &fx, "x", 0).is_err());

    let model = TranslatorModel::new(TranslatorArch { resolution: 16, base_channels: 4 }, 0).unwrap();
    let big = make_dataset(2, 32, 0).unwrap().samples;
    assert!(matches!(eval_translator(&model, &big, &fx, "x", 0), Err(Error::InvalidArgument(_))));
    assert!(TranslatorModel::new(TranslatorArch { resolution: 18, base_channels: 4 }, 0).is_err());
}

#[test]
fn translator_losses_match_finite_differences() {
    let train = samples(2, 4);
    let (b, a) = split_modalities(&train).unwrap();
    let model = TranslatorModel::new(TranslatorArch { resolution: 16, base_channels: 2 }, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (which, l1_weight) in [(0, 0.0), (1, 10.0)] {
        let mut g = Graph::new();
        let bi = g.constant(b.clone());
        let ai = g.constant(a.clone());
        let (p, d, gl) = loss_graph(&model, &mut g, bi, ai, l1_weight).unwrap();
        let loss = if which == 0 { d } else { gl };
        let ids: Vec<_> = p.trainable().iter().map(|(_, id)| *id).collect();
        let report = check_gradients(&mut g, loss, &ids, 3, &mut rng);
        assert!(report.checked > 20);
        assert!(report.max_rel_err < 1e-4, "{}", report.worst);
    }
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let train = samples(20, 5);
    let cfg = quick(3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| train_translator(&train, &Augmenter::none(), &cfg, Some(d.path())).unwrap())
        .collect();
    assert_eq!(runs[0].model, runs[1].model);
    assert_eq!(runs[0].log, runs[1].log);
    for name in ["translator.json", "translator.bin", "translator_log.csv"] {
        let x = std::fs::read(dirs[0].path().join(name)).unwrap();
        let y = std::fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let log = &runs[0].log;
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.d_loss.is_finite() && r.l1.is_finite() && r.augmented == 0));
    assert!(log.iter().enumerate().all(|(e, r)| r.lr == cfg.lr_at(e)));
    let csv = std::fs::read_to_string(dirs[0].path().join("translator_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let back = TranslatorModel::load(&dirs[0].path().join("translator.json")).unwrap();
    assert_eq!(back, runs[0].model);
    assert!(matches!(
        TranslatorModel::load(&dirs[0].path().join("absent.json")),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn training_reduces_the_l1_term() {
    let train = samples(24, 6);
    let out = train_translator(&train, &Augmenter::none(), &quick(12), None).unwrap();
    let (first, last) = (out.log[0].l1, out.log.last().unwrap().l1);
    assert!(last < 0.7 * first, "l1 {first} -> {last}");
}

#[test]
fn augmentation_stream_is_isolated() {
    // At p_aug = 1 the transforms never fire; only the augmentation stream is
    // consumed, so the result must equal the unaugmented run.
    let train = samples(16, 7);
    let cfg = quick(2);
    let plain = train_translator(&train, &Augmenter::none(), &cfg, None).unwrap();
    let idle = Augmenter::standard_da(TransformSpec::default(), 1.0).unwrap();
    let idle = train_translator(&train, &idle, &cfg, None).unwrap();
    assert_eq!(plain.model, idle.model);
    let busy = Augmenter::standard_da(TransformSpec::default(), 0.0).unwrap();
    let busy = train_translator(&train, &busy, &cfg, None).unwrap();
    assert_ne!(plain.model, busy.model);
    assert!(busy.log.iter().all(|r| r.augmented > 0));
}

#[test]
fn per_sample_csv_has_one_row_per_test_sample() {
    let train = samples(12, 8);
    let test = samples(7, 9);
    let out = train_translator(&train, &Augmenter::none(), &quick(1), None).unwrap();
    let fx = FeatureExtractor::new(1, 0);
    let (report, rows) = eval_translator(&out.model, &test, &fx, "none", 3).unwrap();
    assert_eq!(report.seed, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/metrics.csv");
    write_sample_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,policy,mae,ssim,psnr,perc");
    assert_eq!(lines.len(), 8);
}

#[test]
fn missing_latents_stop_latent_training() {
    let t = toy();
    let fx = FeatureExtractor::new(2, 0);
    let train = t.data.subset(&t.split.train[..8]).unwrap();
    let icfg = InversionConfig {
        steps: 2,
        ..InversionConfig::default()
    };
    let table = invert_dataset(&t.model, &fx, &t.data, &t.split.train[..4], &icfg).unwrap();
    let refs = ReferenceSet::from_samples(&train[..4], &table, &fx).unwrap();
    let cfg = PolicyConfig {
        p_aug: 0.0,
        ..PolicyConfig::preset("mae").unwrap()
    };
    let aug = Augmenter::latent(&t.model, &fx, &refs, &table, cfg.clone()).unwrap();
    match train_translator(&train, &aug, &quick(1), None) {
        Err(Error::MissingLatent(ids)) => assert!(ids.iter().all(|id| t.split.train[4..8].contains(id))),
        other => panic!("expected missing latents, got {:?}", other.map(|o| o.log)),
    }

    // A non-finite latent fails navigation and names the sample.
    let mut latents = table.latents().clone();
    latents.data_mut()[0] = f64::NAN;
    let ids = table.ids().to_vec();
    let bad = LatentTable::new(ids.clone(), latents, table.final_losses().to_vec(), serde_json::Value::Null).unwrap();
    let aug = Augmenter::latent(&t.model, &fx, &refs, &bad, cfg).unwrap();
    match train_translator(&train[..4], &aug, &quick(1), None) {
        Err(Error::PolicyFailure { sample_id, .. }) => assert_eq!(sample_id, ids[0]),
        other => panic!("expected a policy failure, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn config_is_validated() {
    let train = samples(4, 10);
    for cfg in [
        DownstreamConfig { epochs: 0, ..quick(1) },
        DownstreamConfig { lr: -1.0, ..quick(1) },
        DownstreamConfig { beta1: 1.0, ..quick(1) },
    ] {
        assert!(train_translator(&train, &Augmenter::none(), &cfg, None).is_err());
    }
    assert!(train_translator(&[], &Augmenter::none(), &quick(1), None).is_err());
    let parsed: DownstreamConfig = toml::from_str("epochs = 5").unwrap();
    assert_eq!(parsed.epochs, 5);
    assert_eq!(parsed.batch_size, DownstreamConfig::default().batch_size);
    assert!(toml::from_str::<DownstreamConfig>("epoch = 5").is_err());
}
