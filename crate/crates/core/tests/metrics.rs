mod common;

use common::assert_close;
use ganaug::metrics::{
    critical_difference, f1, frechet_distance, friedman, image_metrics, knn_precision_recall,
    masked_mae, nemenyi, nemenyi_q, nemenyi_signs, psnr, ssim, FeatureExtractor, MetricReport,
    PSNR_CAP_DB,
};
use ganaug::numerics::Tensor;
use ganaug::synthdata::{make_dataset, stack_images};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            mean.iter()
                .zip(std)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[test]
fn precision_recall_axioms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let real = gaussian_cloud(&mut rng, 200, &[0.0; 5], &[1.0; 5]);
    assert_eq!(knn_precision_recall(&real, &real, 3).unwrap(), (1.0, 1.0));
    let far = gaussian_cloud(&mut rng, 200, &[1000.0; 5], &[1.0; 5]);
    assert_eq!(knn_precision_recall(&real, &far, 3).unwrap(), (0.0, 0.0));
    assert!(knn_precision_recall(&real[..3], &real, 3).is_err());
    assert!(knn_precision_recall(&real, &real[..3], 3).is_err());
}

#[test]
fn precision_recall_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let real = gaussian_cloud(&mut rng, 150, &[0.0; 4], &[1.0; 4]);
    let gen = gaussian_cloud(&mut rng, 120, &[0.5; 4], &[1.3; 4]);
    let base = knn_precision_recall(&real, &gen, 3).unwrap();
    assert!((0.0..=1.0).contains(&base.0) && (0.0..=1.0).contains(&base.1));
    for _ in 0..5 {
        let mut r = real.clone();
        let mut g = gen.clone();
        r.shuffle(&mut rng);
        g.shuffle(&mut rng);
        assert_eq!(knn_precision_recall(&r, &g, 3).unwrap(), base);
    }
}

/// Real data covers two well-separated modes; the generated set covers one.
#[test]
fn half_mode_coverage_gives_half_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut real = gaussian_cloud(&mut rng, 300, &[0.0; 3], &[1.0; 3]);
    real.extend(gaussian_cloud(&mut rng, 300, &[50.0; 3], &[1.0; 3]));
    let gen = gaussian_cloud(&mut rng, 600, &[0.0; 3], &[1.0; 3]);
    let (p, r) = knn_precision_recall(&real, &gen, 3).unwrap();
    assert!((r - 0.5).abs() <= 0.1, "recall {r}");
    assert!(p > 0.9, "precision {p}");
}

#[test]
fn f1_closed_forms() {
    assert_eq!(f1(1.0, 1.0), 1.0);
    assert_eq!(f1(0.0, 0.7), 0.0);
    assert_eq!(f1(0.0, 0.0), 0.0);
    assert_close(f1(0.5, 1.0), 2.0 / 3.0, 1e-15);
}

#[test]
fn frechet_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = gaussian_cloud(&mut rng, 400, &[0.0; 6], &[1.0, 2.0, 0.5, 1.0, 1.0, 3.0]);
    let r = frechet_distance(&a, &a).unwrap();
    assert!(r.distance.abs() < 1e-6, "{}", r.distance);
    assert_eq!(r.regularization, 0.0);
    // Same covariance, shifted mean.
    let delta = [0.5, -1.0, 2.0, 0.0, 0.25, 1.0];
    let b: Vec<Vec<f64>> = a.iter().map(|p| p.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
    let expected: f64 = delta.iter().map(|d| d * d).sum();
    assert_close(frechet_distance(&a, &b).unwrap().distance, expected, 1e-6);
    let c = gaussian_cloud(&mut rng, 300, &[1.0; 6], &[0.7; 6]);
    assert_close(
        frechet_distance(&a, &c).unwrap().distance,
        frechet_distance(&c, &a).unwrap().distance,
        1e-8,
    );
}

#[test]
fn frechet_matches_closed_form_for_gaussians() {
    // Diagonal covariances: d = ‖μa − μb‖² + Σ (σa − σb)².
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ma, sa) = ([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]);
    let (mb, sb) = ([1.0, -1.0, 0.5, 0.0], [2.0, 0.5, 1.0, 1.5]);
    let a = gaussian_cloud(&mut rng, 5000, &ma, &sa);
    let b = gaussian_cloud(&mut rng, 5000, &mb, &sb);
    let analytic: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let d = frechet_distance(&a, &b).unwrap().distance;
    assert!((d - analytic).abs() / analytic < 0.05, "{d} vs {analytic}");
}

#[test]
fn frechet_regularizes_small_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = gaussian_cloud(&mut rng, 5, &[0.0; 10], &[1.0; 10]);
    let r = frechet_distance(&a, &a).unwrap();
    assert!(r.regularization > 0.0);
    assert!(r.distance.abs() < 1e-6);
}

#[test]
fn image_metric_identities() {
    let ds = make_dataset(2, 32, 1).unwrap();
    let s = &ds.samples[0];
    let mask = s.body_mask.as_ref().unwrap();
    let m = image_metrics(&s.modality_a, &s.modality_a, mask, 32).unwrap();
    assert_eq!((m.mae, m.psnr), (0.0, PSNR_CAP_DB));
    assert_close(m.ssim, 1.0, 1e-12);

    let shifted: Vec<f64> = s.modality_a.iter().map(|v| v + 0.1).collect();
    let full = vec![1.0; 1024];
    assert_close(masked_mae(&s.modality_a, &shifted, &full).unwrap(), 0.1, 1e-12);
    assert_close(psnr(&s.modality_a, &shifted).unwrap(), 20.0, 1e-9);
    assert!(masked_mae(&s.modality_a, &shifted, &vec![0.0; 1024]).is_err());

    // Constant images: only the luminance term differs from 1.
    let (a, b) = (0.2, 0.6);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert_close(ssim(&vec![a; 100], &vec![b; 100], 10).unwrap(), expected, 1e-12);

    let other = &ds.samples[1].modality_a;
    let v = ssim(&s.modality_a, other, 32).unwrap();
    assert!((-1.0..=1.0).contains(&v) && v < 1.0);
}

#[test]
fn perceptual_distance_axioms() {
    let fx = FeatureExtractor::new(2, 9);
    let ds = make_dataset(2, 32, 2).unwrap();
    let a = ds.samples[0].to_tensor();
    let b = ds.samples[1].to_tensor();
    assert_eq!(fx.perceptual_distance(&a, &a).unwrap(), 0.0);
    let ab = fx.perceptual_distance(&a, &b).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, fx.perceptual_distance(&b, &a).unwrap());
    assert!(fx.perceptual_distance(&a, &Tensor::zeros(&[2, 16, 16])).is_err());
    assert_eq!(fx.embed(&stack_images(&ds.samples).unwrap()).unwrap()[0].len(), 224);
}

fn shift_right(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 1..w {
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + y) * w + x - 1];
            }
        }
    }
    out
}

/// Relative to an unrelated phantom, a one-pixel shift looks closer under the
/// perceptual distance than under pixel MSE. Bound measured on 100 pairs.
#[test]
fn shifted_copy_is_relatively_closer_in_feature_space() {
    let fx = FeatureExtractor::new(2, 0);
    let ds = make_dataset(101, 32, 11).unwrap();
    let mse = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| (x - y) * (x - y)).unwrap().mean();
    let (mut perc_ratio, mut pix_ratio) = (0.0, 0.0);
    for pair in ds.samples.windows(2) {
        let x = pair[0].to_tensor();
        let y = pair[1].to_tensor();
        let xs = shift_right(&x);
        perc_ratio += fx.perceptual_distance(&x, &xs).unwrap() / fx.perceptual_distance(&x, &y).unwrap();
        pix_ratio += mse(&x, &xs) / mse(&x, &y);
    }
    perc_ratio /= 100.0;
    pix_ratio /= 100.0;
    // Measured: perceptual 0.286, pixel 0.320.
    assert!(perc_ratio < pix_ratio && perc_ratio < 0.30, "{perc_ratio} vs {pix_ratio}");
}

/// Independent rank oracle: ranks by counting, Conover's tie-aware form of the statistic.
fn friedman_oracle(m: &[Vec<f64>]) -> f64 {
    let (k, n) = (m.len(), m[0].len());
    let mut r = vec![vec![0.0; n]; k];
    for s in 0..n {
        for i in 0..k {
            let less = (0..k).filter(|&j| m[j][s] < m[i][s]).count() as f64;
            let equal = (0..k).filter(|&j| m[j][s] == m[i][s]).count() as f64;
            r[i][s] = 1.0 + less + (equal - 1.0) / 2.0;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let a1: f64 = r.iter().flatten().map(|v| v * v).sum();
    let c1 = nf * kf * (kf + 1.0).powi(2) / 4.0;
    let num: f64 = r
        .iter()
        .map(|row| (row.iter().sum::<f64>() - nf * (kf + 1.0) / 2.0).powi(2))
        .sum();
    (kf - 1.0) * num / (a1 - c1)
}

#[test]
fn friedman_matches_rank_oracle() {
    let matrices: Vec<Vec<Vec<f64>>> = vec![
        vec![
            vec![9.0, 9.5, 5.0, 7.5, 9.5, 7.5, 8.0, 7.0, 8.5, 6.0],
            vec![7.0, 6.5, 7.0, 7.5, 5.0, 8.0, 6.0, 6.5, 7.0, 7.0],
            vec![6.0, 8.0, 4.0, 6.0, 7.0, 6.5, 6.0, 4.0, 6.5, 3.0],
        ],
        vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![1.0, 3.0, 3.0, 2.0, 6.0],
            vec![2.0, 2.0, 1.0, 4.0, 4.0],
            vec![0.5, 2.0, 3.0, 5.0, 5.0],
        ],
        vec![vec![0.31, 0.29, 0.35, 0.30], vec![0.28, 0.29, 0.33, 0.27]],
    ];
    for m in &matrices {
        let fr = friedman(m).unwrap();
        assert_close(fr.statistic, friedman_oracle(m), 1e-12);
        assert!((0.0..=1.0).contains(&fr.p_value));
    }
    let identical = vec![vec![1.0; 6]; 4];
    let fr = friedman(&identical).unwrap();
    assert_eq!((fr.statistic, fr.p_value), (0.0, 1.0));
}

#[test]
fn friedman_is_invariant_to_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
    let t: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| (3.0 * v).exp() - 2.0).collect()).collect();
    assert_eq!(friedman(&m).unwrap().statistic, friedman(&t).unwrap().statistic);
}

#[test]
fn dominant_method_is_detected_by_friedman_and_permutation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut m: Vec<Vec<f64>> = (0..4).map(|_| (0..20).map(|_| noise.sample(&mut rng)).collect()).collect();
    for s in 0..20 {
        m[0][s] = m[1..].iter().map(|r| r[s]).fold(f64::MIN, f64::max) + 0.5;
    }
    let observed = friedman(&m).unwrap();
    assert!(observed.p_value < 0.05);
    let trials = 2000;
    let mut extreme = 0;
    for _ in 0..trials {
        let mut p = m.clone();
        for s in 0..20 {
            let mut col: Vec<f64> = p.iter().map(|r| r[s]).collect();
            col.shuffle(&mut rng);
            for (row, v) in p.iter_mut().zip(col) {
                row[s] = v;
            }
        }
        if friedman(&p).unwrap().statistic >= observed.statistic {
            extreme += 1;
        }
    }
    assert!((extreme as f64 + 1.0) / (trials as f64 + 1.0) < 0.05);
}

/// P(range of k iid standard normals <= q), infinite degrees of freedom.
fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    let z = StatNormal::new(0.0, 1.0).unwrap();
    let (lo, hi, steps) = (-9.0, 9.0, 20_000);
    let h = (hi - lo) / steps as f64;
    let f = |x: f64| z.pdf(x) * (z.cdf(x + q) - z.cdf(x)).powi(k as i32 - 1);
    // Simpson's rule.
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    k as f64 * s * h / 3.0
}

fn nemenyi_q_oracle(k: usize, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k) < 1.0 - alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) / 2f64.sqrt()
}

#[test]
fn critical_values_match_studentized_range() {
    for alpha in [0.05, 0.10] {
        for k in 2..=10 {
            let table = nemenyi_q(k, alpha).unwrap();
            let oracle = nemenyi_q_oracle(k, alpha);
            assert!((table - oracle).abs() < 2e-3, "k={k} α={alpha}: {table} vs {oracle}");
        }
    }
    let cd = critical_difference(4, 20, 0.05).unwrap();
    assert_close(cd, nemenyi_q_oracle(4, 0.05) * (20.0f64 / 120.0).sqrt(), 2e-3);
    assert_close(cd, 1.0488, 1e-3);
}

#[test]
fn nemenyi_directions_and_scores() {
    let identical = vec![vec![0.5; 10]; 3];
    assert!(nemenyi(&identical, 0.05, true).is_err());
    let res = nemenyi_signs(&identical, 0.05, true).unwrap();
    assert!(res.signs.iter().flatten().all(|&s| s == 0));
    assert!(res.scores.iter().all(|&s| s == 0));

    // Method 0 has the lowest error on every subject by a wide margin; lower is better.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m: Vec<Vec<f64>> = (0..4).map(|i| (0..30).map(|_| 1.0 + i as f64 + rng.random::<f64>() * 0.1).collect()).collect();
    m[0].iter_mut().for_each(|v| *v -= 0.5);
    let res = nemenyi(&m, 0.05, false).unwrap();
    assert_eq!(res.scores[0], 3);
    assert_eq!(res.scores[3], -3);
    assert_eq!(res.signs[0][1], 1);
    assert_eq!(res.signs[1][0], -1);
}

#[test]
fn report_rejects_unknown_keys_and_non_finite_values() {
    let mut r = MetricReport::new("latent", 1);
    r.insert("mae", 0.1).unwrap();
    assert!(r.insert("lpips", 0.1).is_err());
    assert!(r.insert("ssim", f64::NAN).is_err());
    assert!(r.metadata["feature_extractor"].contains("not LPIPS"));
}
