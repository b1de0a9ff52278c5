//! Friedman omnibus test and Nemenyi post-hoc comparison over a
//! methods x subjects score matrix.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Mean rank of each method; rank 1 is the smallest score of a subject.
    pub avg_ranks: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NemenyiResult {
    pub critical_difference: f64,
    pub avg_ranks: Vec<f64>,
    /// `signs[i][j]` is +1 when method `i` is significantly better than `j`,
    /// -1 when significantly worse, 0 otherwise.
    pub signs: Vec<Vec<i8>>,
    /// Row sums of `signs`.
    pub scores: Vec<i32>,
}

/// Ranks with ties sharing the mean of the positions they span.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn validate(results: &[Vec<f64>]) -> Result<(usize, usize)> {
    let k = results.len();
    if k < 2 {
        return Err(Error::StatsPrecondition(format!("need at least 2 methods, got {k}")));
    }
    let n = results[0].len();
    if n < 2 {
        return Err(Error::StatsPrecondition(format!("need at least 2 subjects, got {n}")));
    }
    if results.iter().any(|r| r.len() != n) {
        return Err(Error::StatsPrecondition("methods have different subject counts".into()));
    }
    if results.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::StatsPrecondition("scores must be finite".into()));
    }
    Ok((k, n))
}

/// Friedman test with mid-ranks and the usual tie correction; `results[m][s]`
/// is method `m` on subject `s`.
pub fn friedman(results: &[Vec<f64>]) -> Result<FriedmanResult> {
    let (k, n) = validate(results)?;
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for s in 0..n {
        let column: Vec<f64> = results.iter().map(|r| r[s]).collect();
        let ranks = mid_ranks(&column);
        for (sum, r) in rank_sums.iter_mut().zip(&ranks) {
            *sum += r;
        }
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let avg_ranks: Vec<f64> = rank_sums.iter().map(|r| r / nf).collect();
    let correction = 1.0 - tie_term / (nf * (kf * kf * kf - kf));
    if correction <= 0.0 {
        // Every subject ties every method.
        return Ok(FriedmanResult {
            statistic: 0.0,
            p_value: 1.0,
            avg_ranks,
        });
    }
    let ssq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * ssq - 3.0 * nf * (kf + 1.0);
    let statistic = (raw / correction).max(0.0);
    let chi = ChiSquared::new(kf - 1.0).expect("positive degrees of freedom");
    Ok(FriedmanResult {
        statistic,
        p_value: chi.sf(statistic),
        avg_ranks,
    })
}

/// Two-tailed Nemenyi critical values `q_α` (studentized range over √2) for
/// 2..=10 methods.
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if alpha == 0.05 {
        &Q_05
    } else if alpha == 0.10 {
        &Q_10
    } else {
        return Err(Error::invalid(format!("Nemenyi critical values exist for α = 0.05 or 0.10, got {alpha}")));
    };
    if !(2..=10).contains(&k) {
        return Err(Error::invalid(format!("Nemenyi table covers 2..=10 methods, got {k}")));
    }
    Ok(table[k - 2])
}

/// `q_α · sqrt(k (k + 1) / (6 n))`.
pub fn critical_difference(k: usize, n: usize, alpha: f64) -> Result<f64> {
    Ok(nemenyi_q(k, alpha)? * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

/// Pairwise Nemenyi directions without checking the Friedman test first.
pub fn nemenyi_signs(results: &[Vec<f64>], alpha: f64, higher_is_better: bool) -> Result<NemenyiResult> {
    let (k, n) = validate(results)?;
    let fr = friedman(results)?;
    let cd = critical_difference(k, n, alpha)?;
    let mut signs = vec![vec![0i8; k]; k];
    for (i, row) in signs.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            let diff = fr.avg_ranks[i] - fr.avg_ranks[j];
            if i != j && diff.abs() > cd {
                let i_ranks_higher = diff > 0.0;
                *s = if i_ranks_higher == higher_is_better { 1 } else { -1 };
            }
        }
    }
    let scores = signs.iter().map(|r| r.iter().map(|&s| s as i32).sum()).collect();
    Ok(NemenyiResult {
        critical_difference: cd,
        avg_ranks: fr.avg_ranks,
        signs,
        scores,
    })
}

/// Nemenyi post-hoc test; fails unless the Friedman test rejects at `alpha`.
pub fn nemenyi(results: &[Vec<f64>], alpha: f64, higher_is_better: bool) -> Result<NemenyiResult> {
    let fr = friedman(results)?;
    if fr.p_value >= alpha {
        return Err(Error::StatsPrecondition(format!(
            "Friedman test does not reject at α = {alpha} (p = {:.4})",
            fr.p_value
        )));
    }
    nemenyi_signs(results, alpha, higher_is_better)
}
