use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            row.clear();
            row.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| sq_dist(p, q)),
            );
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Fraction of `queries` inside the union of balls around `support`.
fn coverage(support: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| support.iter().zip(radii).any(|(s, &r)| sq_dist(q, s) <= r))
        .count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall (Kynkäänniemi et al.).
///
/// Precision is the fraction of generated points inside the real manifold;
/// recall is the fraction of real points inside the generated manifold.
pub fn knn_precision_recall(real: &[Vec<f64>], generated: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    for (name, set) in [("real", real), ("generated", generated)] {
        if set.len() < k + 1 {
            return Err(Error::invalid(format!(
                "{name} set has {} points; k = {k} needs at least {}",
                set.len(),
                k + 1
            )));
        }
    }
    let dim = real[0].len();
    if real.iter().chain(generated).any(|p| p.len() != dim) {
        return Err(Error::invalid("feature vectors differ in length"));
    }
    let real_radii = knn_radii(real, k);
    let gen_radii = knn_radii(generated, k);
    Ok((
        coverage(real, &real_radii, generated),
        coverage(generated, &gen_radii, real),
    ))
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}
