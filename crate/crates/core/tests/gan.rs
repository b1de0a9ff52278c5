mod common;

use common::{assert_close, toy, TOY_RES};
use ganaug::gan::{r1_from_logits, train_gan, truncate, GanArch, GanModel, GanTrainConfig};
use ganaug::metrics::{frechet_distance, FeatureExtractor};
use ganaug::numerics::{BoundParams, Graph, LayerSpec, ParamSet, Tensor};
use ganaug::synthdata::{make_dataset, stack_images};
use ganaug::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fresh(seed: u64) -> GanModel {
    GanModel::new(GanArch::for_resolution(16), seed).unwrap()
}

fn uniform_noise(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 2 * TOY_RES * TOY_RES).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, 2, TOY_RES, TOY_RES], data).unwrap()
}

#[test]
fn default_config_and_architecture() {
    let cfg = GanTrainConfig::default();
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.r1_weight, 0.8192);
    assert_eq!((cfg.lr_g, cfg.lr_d), (0.0025, 0.0025));
    let arch = GanArch::for_resolution(32);
    assert_eq!((arch.mapping_depth, arch.latent_dim), (2, 64));
}

#[test]
fn mapping_is_deterministic_and_checks_dimension() {
    let m = fresh(1);
    let z = Tensor::randn(&[3, 64], &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(m.mapping(&z).unwrap(), m.mapping(&z).unwrap());
    assert_eq!(m.mapping(&z).unwrap().shape(), &[3, 64]);
    let short = Tensor::zeros(&[3, 63]);
    assert!(matches!(m.mapping(&short), Err(Error::InvalidArgument(_))));
}

#[test]
fn mean_latent_standard_error_is_small() {
    let m = fresh(4);
    let n = 10_000;
    let z = Tensor::randn(&[n, 64], &mut ChaCha8Rng::seed_from_u64(5));
    let w = m.mapping(&z).unwrap();
    let mut mean = vec![0.0; 64];
    for row in w.data().chunks(64) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v / n as f64;
        }
    }
    let mut var = vec![0.0; 64];
    for row in w.data().chunks(64) {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu).powi(2) / (n - 1) as f64;
        }
    }
    let a = m.estimate_w_mean(n, 10).unwrap();
    let b = m.estimate_w_mean(n, 11).unwrap();
    for k in 0..64 {
        let sd = var[k].sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(se < 0.05 * sd);
        // Two independent estimates differ by N(0, 2 se²); 5 sigma bound.
        assert!((a.data()[k] - b.data()[k]).abs() < 5.0 * 2f64.sqrt() * se, "coordinate {k}");
    }
}

#[test]
fn generator_is_bounded_two_channel_and_deterministic() {
    let m = fresh(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = Tensor::randn(&[4, 64], &mut rng);
    for v in w.data_mut().iter_mut().take(64) {
        *v *= 50.0;
    }
    let x = m.generate(&w).unwrap();
    assert_eq!(x.shape(), &[4, 2, 16, 16]);
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(x, m.generate(&w).unwrap());
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let m = fresh(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w0 = Tensor::randn(&[1, 64], &mut rng);
    let mean_out = |w: &Tensor| {
        let x = m.generate(w).unwrap();
        x.data().iter().sum::<f64>() / x.numel() as f64
    };
    let mut g = Graph::new();
    let p = m.bind(&mut g, ganaug::gan::Trainable::None).unwrap();
    let wi = g.input("w", w0.clone()).unwrap();
    let x = m.generator_graph(&mut g, &p, wi).unwrap();
    let loss = g.mean(x).unwrap();
    let grad = g.backprop(loss, &[wi]).unwrap().remove(0);
    let h = 1e-5;
    for _ in 0..10 {
        let c = rng.random_range(0..64);
        let mut plus = w0.clone();
        plus.data_mut()[c] += h;
        let mut minus = w0.clone();
        minus.data_mut()[c] -= h;
        let fd = (mean_out(&plus) - mean_out(&minus)) / (2.0 * h);
        let an = grad.data()[c];
        assert!(an.is_finite());
        assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-6), "coordinate {c}: {an} vs {fd}");
    }
}

#[test]
fn fidelity_term_values() {
    for (logit, want) in [(0.0, std::f64::consts::LN_2), (10.0, 4.539889921686465e-5)] {
        let mut g = Graph::new();
        let d = g.input("d", Tensor::scalar(logit)).unwrap();
        let neg = g.scale(d, -1.0).unwrap();
        let lf = g.softplus(neg).unwrap();
        assert_close(g.scalar(lf).unwrap(), want, 1e-12 * want.max(1.0));
    }
}

#[test]
fn discriminator_rejects_wrong_resolution() {
    let m = fresh(0);
    assert!(m.discriminate(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
    assert!(m.discriminate(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    assert_eq!(m.discriminate(&Tensor::zeros(&[3, 2, 16, 16])).unwrap().len(), 3);
}

#[test]
fn r1_of_linear_discriminator_is_squared_weight_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = Tensor::randn(&[32, 1], &mut rng);
    let norm2: f64 = v.data().iter().map(|a| a * a).sum();
    for seed in 0..3 {
        let x = Tensor::randn(&[5, 2, 4, 4], &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::new();
        let xi = g.input("x", x).unwrap();
        let flat = g.reshape(xi, &[5, 32]).unwrap();
        let vi = g.constant(v.clone());
        let logits = g.matmul(flat, vi).unwrap();
        let logits = g.reshape(logits, &[5]).unwrap();
        let r1 = r1_from_logits(&mut g, xi, logits).unwrap();
        assert_close(g.scalar(r1).unwrap(), norm2, 1e-12 * norm2);
    }
}

#[test]
fn r1_of_zero_discriminator_is_zero() {
    let mut m = fresh(9);
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("disc.")).collect();
    assert!(!names.is_empty());
    for n in names {
        m.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let x = uniform_noise(3, 1);
    assert_eq!(m.r1_penalty(&x).unwrap(), 0.0);
}

/// `mean_n Σ_i (∂D_n/∂x_i)²` by central differences; every sample is
/// perturbed at once since samples do not interact.
fn r1_oracle(d: &dyn Fn(&Tensor) -> Vec<f64>, x: &Tensor, h: f64) -> f64 {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut total = 0.0;
    for i in 0..per {
        let mut plus = x.clone();
        let mut minus = x.clone();
        for s in 0..n {
            plus.data_mut()[s * per + i] += h;
            minus.data_mut()[s * per + i] -= h;
        }
        let (dp, dm) = (d(&plus), d(&minus));
        total += dp.iter().zip(&dm).map(|(a, b)| ((a - b) / (2.0 * h)).powi(2)).sum::<f64>();
    }
    total / n as f64
}

#[test]
fn r1_matches_finite_differences_on_three_layer_net() {
    let layers = [
        LayerSpec::dense("l0", 18, 12),
        LayerSpec::dense("l1", 12, 8),
        LayerSpec::dense("l2", 8, 1),
    ];
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for l in &layers {
        l.init(&mut params, &mut rng);
    }
    let forward = |g: &mut Graph, x| {
        let p = BoundParams::bind(g, &params, false).unwrap();
        let mut h = g.reshape(x, &[4, 18]).unwrap();
        for (k, l) in layers.iter().enumerate() {
            h = l.forward(g, &p, h).unwrap();
            if k < 2 {
                h = g.leaky_relu(h, 0.2).unwrap();
            }
        }
        g.reshape(h, &[4]).unwrap()
    };
    let x = Tensor::randn(&[4, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let xi = g.input("x", x.clone()).unwrap();
    let logits = forward(&mut g, xi);
    let r1 = r1_from_logits(&mut g, xi, logits).unwrap();
    let got = g.scalar(r1).unwrap();
    let d = |t: &Tensor| {
        let mut g = Graph::new();
        let xi = g.constant(t.clone());
        let out = forward(&mut g, xi);
        g.value(out).data().to_vec()
    };
    let want = r1_oracle(&d, &x, 1e-5);
    assert!((got - want).abs() <= 1e-3 * want, "{got} vs {want}");
}

#[test]
fn model_r1_matches_finite_differences() {
    let m = fresh(13);
    let x = uniform_noise(2, 14);
    let got = m.r1_penalty(&x).unwrap();
    let want = r1_oracle(&|t| m.discriminate(t).unwrap(), &x, 1e-5);
    assert!((got - want).abs() <= 1e-3 * want, "{got} vs {want}");
}

#[test]
fn truncation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w_mean = Tensor::randn(&[4], &mut rng);
    let u = Tensor::randn(&[2, 4], &mut rng);
    let mut w = u.clone();
    for row in w.data_mut().chunks_mut(4) {
        for (v, m) in row.iter_mut().zip(w_mean.data()) {
            *v += m;
        }
    }
    assert_eq!(truncate(&w, &w_mean, 1.0).unwrap(), w);
    let zero = truncate(&w, &w_mean, 0.0).unwrap();
    assert!(zero.data().chunks(4).all(|r| r == w_mean.data()));
    let half = truncate(&w, &w_mean, 0.5).unwrap();
    for (i, v) in half.data().iter().enumerate() {
        assert_close(*v, w_mean.data()[i % 4] + 0.5 * u.data()[i], 1e-12);
    }
    assert!(truncate(&w, &w_mean, 1.5).is_err());
    assert!(truncate(&w, &w_mean, -0.1).is_err());
}

#[test]
fn sample_variance_grows_with_truncation() {
    let mut m = fresh(16);
    let w_mean = m.estimate_w_mean(2000, 17).unwrap();
    m.set_w_mean(w_mean).unwrap();
    let psis = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut mean_var = vec![0.0; psis.len()];
    for seed in 0..5 {
        let z = Tensor::randn(&[32, 64], &mut ChaCha8Rng::seed_from_u64(100 + seed));
        let w = m.mapping(&z).unwrap();
        for (k, &psi) in psis.iter().enumerate() {
            let x = m.generate(&truncate(&w, m.w_mean(), psi).unwrap()).unwrap();
            let per = x.numel() / 32;
            let mut var = 0.0;
            for i in 0..per {
                let col: Vec<f64> = (0..32).map(|s| x.data()[s * per + i]).collect();
                let mu = col.iter().sum::<f64>() / 32.0;
                var += col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 31.0;
            }
            if psi == 0.0 {
                let first = &x.data()[..per];
                assert!(x.data().chunks(per).all(|s| s == first));
                var = 0.0;
            }
            mean_var[k] += var / 5.0;
        }
    }
    assert!(mean_var.windows(2).all(|p| p[0] <= p[1]), "{mean_var:?}");
}

fn tiny_cfg(seed: u64, disc_aug_prob: f64) -> GanTrainConfig {
    GanTrainConfig {
        batch_size: 4,
        iterations: 6,
        w_mean_samples: 100,
        disc_aug_prob,
        seed,
        ..GanTrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_to_the_byte() {
    let data = make_dataset(12, 16, 3).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = GanTrainConfig {
        checkpoint_every: 3,
        ..tiny_cfg(21, 0.5)
    };
    let ra = train_gan(&data.samples, GanArch::for_resolution(16), &cfg, Some(a.path())).unwrap();
    let rb = train_gan(&data.samples, GanArch::for_resolution(16), &cfg, Some(b.path())).unwrap();
    assert_eq!(ra.log, rb.log);
    for file in ["gan.json", "gan.bin", "gan_iter000003.json", "gan_iter000003.bin", "gan_train_log.csv"] {
        let fa = std::fs::read(a.path().join(file)).unwrap();
        assert_eq!(fa, std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let loaded = GanModel::load(&a.path().join("gan.json")).unwrap();
    assert_eq!(loaded, ra.model);
    let log = std::fs::read_to_string(a.path().join("gan_train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,d_loss,g_loss,r1");
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn training_without_discriminator_augmentation() {
    let data = make_dataset(12, 16, 3).unwrap();
    let out = train_gan(&data.samples, GanArch::for_resolution(16), &tiny_cfg(22, 0.0), None).unwrap();
    assert_eq!(out.log.len(), 6);
    assert!(out.log.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()));
    // R1 is evaluated on the lazy schedule.
    assert!(out.log[0].r1.is_some() && out.log[1].r1.is_none() && out.log[4].r1.is_some());
}

#[test]
fn training_rejects_bad_input() {
    let data = make_dataset(12, 16, 3).unwrap();
    let arch = GanArch::for_resolution(16);
    assert!(train_gan(&[], arch.clone(), &tiny_cfg(0, 0.2), None).is_err());
    assert!(train_gan(&data.samples, arch.clone(), &tiny_cfg(0, 1.5), None).is_err());
    assert!(train_gan(&data.samples, GanArch::for_resolution(32), &tiny_cfg(0, 0.2), None).is_err());
    let cfg = GanTrainConfig {
        lr_d: 1e250,
        lr_g: 1e250,
        ..tiny_cfg(0, 0.0)
    };
    match train_gan(&data.samples, arch, &cfg, None) {
        Err(Error::NonFiniteLoss { stage, step }) => assert!(stage == "gan_train" && step < 6),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn trained_discriminator_prefers_real_images() {
    let t = toy();
    let val = stack_images(&t.data.subset(&t.split.validation).unwrap()).unwrap();
    let real = t.model.discriminate(&val).unwrap();
    let noise = t.model.discriminate(&uniform_noise(real.len(), 30)).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&real) > mean(&noise), "real {} noise {}", mean(&real), mean(&noise));
}

#[test]
fn trained_generator_is_closer_to_data_than_noise() {
    let t = toy();
    let train = stack_images(&t.data.subset(&t.split.train).unwrap()).unwrap();
    let n = train.shape()[0];
    let z = Tensor::randn(&[n, 64], &mut ChaCha8Rng::seed_from_u64(31));
    let gen = t.model.generate(&t.model.mapping(&z).unwrap()).unwrap();
    let fx = FeatureExtractor::new(2, 0);
    let real = fx.embed(&train).unwrap();
    let d_gen = frechet_distance(&fx.embed(&gen).unwrap(), &real).unwrap().distance;
    let d_noise = frechet_distance(&fx.embed(&uniform_noise(n, 32)).unwrap(), &real).unwrap().distance;
    assert!(d_gen < d_noise, "generated {d_gen} noise {d_noise}");
}
