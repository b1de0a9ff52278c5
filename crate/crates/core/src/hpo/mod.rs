//! Tree-structured Parzen search over policy configurations, the two
//! search objectives, and the `p_aug` grid.

mod objectives;
mod tpe;

pub use objectives::{f1_between, f1_objective, mae_objective, ObjectiveData, DEFAULT_N_GEN};

use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use tpe::{Categorical, Parzen};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// Maps an objective value to a loss (lower is better).
    fn loss(self, value: f64) -> f64 {
        match self {
            Direction::Minimize => value,
            Direction::Maximize => -value,
        }
    }
}

/// `{0.0, 0.1, …, 0.9}`.
pub fn p_aug_grid() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// Ranges are assumptions chosen to span the two bundled presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    /// Log-uniform bounds shared by the four loss weights.
    pub alpha_range: [f64; 2],
    pub steps_range: [usize; 2],
    /// Log-uniform bounds of the navigation rate.
    pub lr_range: [f64; 2],
    pub p_aug_grid: Vec<f64>,
    /// When false, `p_aug` is taken from the base configuration.
    pub search_p_aug: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            alpha_range: [1e-3, 10.0],
            steps_range: [1, 27],
            lr_range: [1e-3, 1e-1],
            p_aug_grid: p_aug_grid(),
            search_p_aug: true,
        }
    }
}

enum Dim {
    Log(f64, f64),
    Int(usize, usize),
    Choice(usize),
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let log_ok = |[lo, hi]: [f64; 2]| lo > 0.0 && lo < hi && hi.is_finite();
        if !log_ok(self.alpha_range) || !log_ok(self.lr_range) {
            return Err(Error::invalid("log-uniform ranges need 0 < lo < hi < inf"));
        }
        if self.steps_range[0] > self.steps_range[1] {
            return Err(Error::invalid("steps range is empty"));
        }
        if self.search_p_aug
            && (self.p_aug_grid.is_empty() || self.p_aug_grid.iter().any(|p| !(0.0..=1.0).contains(p)))
        {
            return Err(Error::invalid("p_aug grid must be non-empty and inside [0, 1]"));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<Dim> {
        let [alo, ahi] = self.alpha_range;
        let mut dims: Vec<Dim> = (0..4).map(|_| Dim::Log(alo, ahi)).collect();
        dims.push(Dim::Int(self.steps_range[0], self.steps_range[1]));
        dims.push(Dim::Log(self.lr_range[0], self.lr_range[1]));
        if self.search_p_aug {
            dims.push(Dim::Choice(self.p_aug_grid.len()));
        }
        dims
    }

    /// `point` holds ln-values for log dimensions, integers for `steps` and a
    /// grid index for `p_aug`.
    fn config(&self, base: &PolicyConfig, point: &[f64]) -> PolicyConfig {
        let mut cfg = base.clone();
        cfg.alpha_f = point[0].exp();
        cfg.alpha_pix = point[1].exp();
        cfg.alpha_perc = point[2].exp();
        cfg.alpha_lat = point[3].exp();
        cfg.steps = point[4] as usize;
        cfg.lr = point[5].exp();
        if self.search_p_aug {
            cfg.p_aug = self.p_aug_grid[point[6] as usize];
        }
        cfg
    }

    /// One configuration drawn from the prior, other fields from `base`.
    pub fn sample<R: Rng + ?Sized>(&self, base: &PolicyConfig, rng: &mut R) -> Result<PolicyConfig> {
        self.validate()?;
        Ok(self.config(base, &prior_point(&self.dims(), rng)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeSettings {
    pub n_trials: usize,
    /// Fraction of completed trials forming the "good" density.
    pub gamma: f64,
    /// Trials drawn from the prior before the densities are used.
    pub n_startup: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            n_trials: 50,
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            seed: 0,
        }
    }
}

impl TpeSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.n_candidates == 0 {
            return Err(Error::invalid("n_trials and n_candidates must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: PolicyConfig,
    pub objective: String,
    /// NaN for failed trials.
    pub value: f64,
    pub seed: u64,
    pub status: TrialStatus,
    pub error: Option<String>,
}

pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub direction: Direction,
}

impl SearchOutcome {
    /// Best completed trial; the earliest wins ties.
    pub fn best(&self) -> Option<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.status == TrialStatus::Complete)
            .min_by(|a, b| self.direction.loss(a.value).total_cmp(&self.direction.loss(b.value)))
    }
}

fn prior_point<R: Rng + ?Sized>(dims: &[Dim], rng: &mut R) -> Vec<f64> {
    dims.iter()
        .map(|d| match *d {
            Dim::Log(lo, hi) => rng.random_range(lo.ln()..=hi.ln()),
            Dim::Int(lo, hi) => rng.random_range(lo..=hi) as f64,
            Dim::Choice(n) => rng.random_range(0..n) as f64,
        })
        .collect()
}

/// Each dimension independently: candidates from the good density, keep
/// the one maximizing `ln l(x) − ln g(x)`.
fn tpe_point<R: Rng + ?Sized>(
    dims: &[Dim],
    history: &[(Vec<f64>, f64)],
    settings: &TpeSettings,
    rng: &mut R,
) -> Vec<f64> {
    let mut sorted: Vec<&(Vec<f64>, f64)> = history.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n_good = ((settings.gamma * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len() - 1);
    let (good, bad) = sorted.split_at(n_good);
    dims.iter()
        .enumerate()
        .map(|(d, dim)| {
            let column = |set: &[&(Vec<f64>, f64)]| set.iter().map(|(p, _)| p[d]).collect::<Vec<f64>>();
            let (gx, bx) = (column(good), column(bad));
            let pick = |cands: Vec<f64>, score: &dyn Fn(f64) -> f64| {
                cands
                    .into_iter()
                    .map(|c| (c, score(c)))
                    .fold((f64::NAN, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0
            };
            match *dim {
                Dim::Log(lo, hi) => {
                    let (l, g) = (Parzen::fit(&gx, lo.ln(), hi.ln()), Parzen::fit(&bx, lo.ln(), hi.ln()));
                    let cands = (0..settings.n_candidates).map(|_| l.sample(rng)).collect();
                    pick(cands, &|x| l.ln_pdf(x) - g.ln_pdf(x))
                }
                Dim::Int(lo, hi) => {
                    let (a, b) = (lo as f64 - 0.5, hi as f64 + 0.5);
                    let (l, g) = (Parzen::fit(&gx, a, b), Parzen::fit(&bx, a, b));
                    let cands = (0..settings.n_candidates)
                        .map(|_| l.sample(rng).round().clamp(lo as f64, hi as f64))
                        .collect();
                    pick(cands, &|x| l.ln_pdf(x) - g.ln_pdf(x))
                }
                Dim::Choice(n) => {
                    let idx = |v: Vec<f64>| v.into_iter().map(|x| x as usize).collect::<Vec<usize>>();
                    let (l, g) = (Categorical::fit(&idx(gx), n), Categorical::fit(&idx(bx), n));
                    let cands = (0..settings.n_candidates).map(|_| l.sample(rng) as f64).collect();
                    pick(cands, &|x| l.ln_pmf(x as usize) - g.ln_pmf(x as usize))
                }
            }
        })
        .collect()
}

/// Sequential search. The first `n_startup` trials (and any trial while
/// fewer than two have completed) are drawn from the prior. A failing or
/// non-finite objective marks the trial failed and the search continues.
/// Every trial is evaluated with `settings.seed`.
pub fn tpe_search<F>(
    space: &SearchSpace,
    base: &PolicyConfig,
    settings: &TpeSettings,
    objective_name: &str,
    direction: Direction,
    mut objective: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&PolicyConfig, u64) -> Result<f64>,
{
    space.validate()?;
    settings.validate()?;
    base.validate()?;
    let dims = space.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut history: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut trials = Vec::with_capacity(settings.n_trials);
    for index in 0..settings.n_trials {
        let point = if index < settings.n_startup || history.len() < 2 {
            prior_point(&dims, &mut rng)
        } else {
            tpe_point(&dims, &history, settings, &mut rng)
        };
        let config = space.config(base, &point);
        let (value, status, error) = match objective(&config, settings.seed) {
            Ok(v) if v.is_finite() => (v, TrialStatus::Complete, None),
            Ok(v) => (f64::NAN, TrialStatus::Failed, Some(format!("objective returned {v}"))),
            Err(e) => (f64::NAN, TrialStatus::Failed, Some(e.to_string())),
        };
        if status == TrialStatus::Complete {
            history.push((point, direction.loss(value)));
        }
        trials.push(Trial {
            index,
            config,
            objective: objective_name.to_string(),
            value,
            seed: settings.seed,
            status,
            error,
        });
    }
    Ok(SearchOutcome { trials, direction })
}

#[derive(Serialize)]
struct TrialRow<'a> {
    trial: usize,
    objective: &'a str,
    alpha_f: f64,
    alpha_pix: f64,
    alpha_perc: f64,
    alpha_lat: f64,
    steps: usize,
    lr: f64,
    p_aug: f64,
    value: f64,
    seed: u64,
    status: TrialStatus,
    error: &'a str,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

/// One row per trial: index, configuration fields, objective, value, seed
/// and status.
pub fn write_trial_log(path: &Path, trials: &[Trial]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for t in trials {
        let c = &t.config;
        w.serialize(TrialRow {
            trial: t.index,
            objective: &t.objective,
            alpha_f: c.alpha_f,
            alpha_pix: c.alpha_pix,
            alpha_perc: c.alpha_perc,
            alpha_lat: c.alpha_lat,
            steps: c.steps,
            lr: c.lr,
            p_aug: c.p_aug,
            value: t.value,
            seed: t.seed,
            status: t.status,
            error: t.error.as_deref().unwrap_or(""),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub p_aug: f64,
    /// NaN when the evaluation failed.
    pub value: f64,
}

pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best_p_aug: Option<f64>,
}

/// Evaluates every `p_aug` of `grid` with the remaining fields of `base`
/// fixed. Failed points are kept as NaN rows and never chosen.
pub fn paug_grid<F>(grid: &[f64], base: &PolicyConfig, direction: Direction, seed: u64, mut objective: F) -> GridOutcome
where
    F: FnMut(&PolicyConfig, u64) -> Result<f64>,
{
    let rows: Vec<GridRow> = grid
        .iter()
        .map(|&p_aug| {
            let cfg = PolicyConfig { p_aug, ..base.clone() };
            let value = objective(&cfg, seed).ok().filter(|v| v.is_finite()).unwrap_or(f64::NAN);
            GridRow { p_aug, value }
        })
        .collect();
    let best_p_aug = rows
        .iter()
        .filter(|r| r.value.is_finite())
        .min_by(|a, b| direction.loss(a.value).total_cmp(&direction.loss(b.value)))
        .map(|r| r.p_aug);
    GridOutcome { rows, best_p_aug }
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow], objective: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["p_aug", objective]).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([r.p_aug.to_string(), r.value.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

