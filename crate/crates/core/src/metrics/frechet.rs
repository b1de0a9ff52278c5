use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Ridge added to both covariances when a set has no more points than dimensions.
pub const FRECHET_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// Ridge added to both covariances, 0 when none was needed.
    pub regularization: f64,
    /// Total magnitude of negative eigenvalues clipped to 0 in the square root.
    pub clipped_mass: f64,
}

fn moments(points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len();
    let d = points[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Symmetric PSD square root; negative eigenvalues are clipped and their mass returned.
fn sqrt_psd(m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clipped = 0.0;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clipped -= l;
            0.0
        } else {
            l.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), clipped)
}

/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A Σ_B)^{1/2})` between Gaussian fits.
///
/// The trace of `(Σ_A Σ_B)^{1/2}` is computed as the trace of the symmetric
/// `(Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}`, which has the same eigenvalues.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least 2 points per set"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    let regularization = if a.len() <= d || b.len() <= d { FRECHET_EPS } else { 0.0 };
    for i in 0..d {
        cov_a[(i, i)] += regularization;
        cov_b[(i, i)] += regularization;
    }
    let (root_a, clip_a) = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clip_inner = 0.0;
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clip_inner -= l;
                0.0
            } else {
                l.sqrt()
            }
        })
        .sum();
    let diff = mu_a - mu_b;
    let distance = (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetResult {
        distance,
        regularization,
        clipped_mass: clip_a + clip_inner,
    })
}
