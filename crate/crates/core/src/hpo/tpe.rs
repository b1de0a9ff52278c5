//! Univariate Parzen estimators for the tree-structured search.

use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Gaussian mixture over `[lo, hi]`: one component per observation plus a
/// broad prior component centred on the interval.
pub(crate) struct Parzen {
    lo: f64,
    hi: f64,
    mus: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Parzen {
    pub(crate) fn fit(obs: &[f64], lo: f64, hi: f64) -> Self {
        let width = hi - lo;
        let mut mus: Vec<f64> = obs.to_vec();
        mus.push(0.5 * (lo + hi));
        let mut order: Vec<usize> = (0..mus.len()).collect();
        order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]));
        let min_sigma = width / (mus.len() as f64).min(100.0);
        let mut sigmas = vec![width; mus.len()];
        for (rank, &i) in order.iter().enumerate() {
            if i == mus.len() - 1 {
                continue;
            }
            let left = if rank == 0 { mus[i] - lo } else { mus[i] - mus[order[rank - 1]] };
            let right = if rank + 1 == order.len() { hi - mus[i] } else { mus[order[rank + 1]] - mus[i] };
            sigmas[i] = left.max(right).clamp(min_sigma, width);
        }
        Self { lo, hi, mus, sigmas }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = rng.random_range(0..self.mus.len());
        let normal = Normal::new(self.mus[k], self.sigmas[k]).expect("positive width");
        // Inverse-CDF draw from the component truncated to the interval.
        let (a, b) = (normal.cdf(self.lo), normal.cdf(self.hi));
        let u = a + (b - a) * rng.random::<f64>();
        normal.inverse_cdf(u).clamp(self.lo, self.hi)
    }

    pub(crate) fn ln_pdf(&self, x: f64) -> f64 {
        let total: f64 = self
            .mus
            .iter()
            .zip(&self.sigmas)
            .map(|(&mu, &sigma)| {
                let normal = Normal::new(mu, sigma).expect("positive width");
                let mass = normal.cdf(self.hi) - normal.cdf(self.lo);
                normal.pdf(x) / mass.max(f64::MIN_POSITIVE)
            })
            .sum();
        (total / self.mus.len() as f64).max(f64::MIN_POSITIVE).ln()
    }
}

/// Smoothed category frequencies (one pseudo-count per category).
pub(crate) struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub(crate) fn fit(obs: &[usize], n_categories: usize) -> Self {
        let mut counts = vec![1.0; n_categories];
        for &c in obs {
            counts[c] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self {
            probs: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u = rng.random::<f64>();
        for (i, p) in self.probs.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        self.probs.len() - 1
    }

    pub(crate) fn ln_pmf(&self, c: usize) -> f64 {
        self.probs[c].ln()
    }
}
