use std::fs::File;
use std::path::Path;

use serde::Serialize;

use super::stages::Workspace;
use super::{seed_everything, write_provenance, PolicyChoice, RunConfig};
use crate::downstream::SampleMetrics;
use crate::error::{Error, Result};
use crate::metrics::{friedman, nemenyi_signs, FriedmanResult};

/// Metrics entering the rank tests, with whether higher is better.
pub const STAT_METRICS: [(&str, bool); 4] = [("mae", false), ("ssim", true), ("psnr", true), ("perc", false)];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub policy: String,
    pub sample_id: String,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub perc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub policy: String,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub perc: f64,
}

pub struct CompareOutcome {
    pub policies: Vec<String>,
    /// Master seed of each repetition.
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub summary: Vec<SummaryRow>,
    /// Per metric, the Friedman test over test samples (scores averaged over
    /// repetitions); `None` with fewer than two policies.
    pub friedman: Vec<(String, Option<FriedmanResult>)>,
    /// Per metric, the pairwise Nemenyi directions; all zero when the
    /// Friedman test does not reject.
    pub signs: Vec<(String, Vec<Vec<i8>>)>,
}

impl CompareOutcome {
    /// Mean test metric of `policy` under repetition `seed`.
    pub fn summary_value(&self, policy: &str, seed: u64, metric: &str) -> Option<f64> {
        let row = self.summary.iter().find(|r| r.policy == policy && r.seed == seed)?;
        metric_of(row.mae, row.ssim, row.psnr, row.perc, metric)
    }

    /// Sum of Nemenyi directions per policy, per metric and in total.
    pub fn scores(&self) -> Vec<(String, Vec<i32>, i32)> {
        self.policies
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let per: Vec<i32> = self.signs.iter().map(|(_, s)| s[i].iter().map(|&v| v as i32).sum()).collect();
                let total = per.iter().sum();
                (p.clone(), per, total)
            })
            .collect()
    }
}

fn metric_of(mae: f64, ssim: f64, psnr: f64, perc: f64, metric: &str) -> Option<f64> {
    match metric {
        "mae" => Some(mae),
        "ssim" => Some(ssim),
        "psnr" => Some(psnr),
        "perc" => Some(perc),
        _ => None,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path.display().to_string(), e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every policy under `n_seeds` repetitions (master seeds `seed`,
/// `seed + 1`, …) on one shared dataset, then ranks the policies per
/// metric. Everything is written under `<output_dir>/compare`:
/// `per_sample.csv`, `summary.csv`, `friedman.csv`, `nemenyi_<metric>.csv`
/// and the per-policy score table `signs.csv`.
pub fn compare(cfg: &RunConfig, policies: &[PolicyChoice], n_seeds: usize) -> Result<CompareOutcome> {
    cfg.validate()?;
    if policies.is_empty() || n_seeds == 0 {
        return Err(Error::invalid("compare needs at least one policy and one seed"));
    }
    let root = cfg.output_dir.join("compare");
    let data_seeds = seed_everything(cfg.seed);
    let base = Workspace {
        cfg,
        seeds: data_seeds.clone(),
        root: root.clone(),
        data_root: root.clone(),
    };
    base.make_data(&data_seeds)?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut seeds = Vec::with_capacity(n_seeds);
    for rep in 0..n_seeds as u64 {
        let master = cfg.seed.wrapping_add(rep);
        seeds.push(master);
        let ws = Workspace {
            cfg,
            seeds: seed_everything(master),
            root: root.join(format!("seed_{master}")),
            data_root: root.clone(),
        };
        if policies.iter().any(|p| p.needs_gan()) {
            ws.train_gan()?;
        }
        if policies.iter().any(|p| p.needs_latents()) {
            ws.invert()?;
        }
        for &policy in policies {
            ws.train_downstream(policy)?;
            let (report, per_sample) = ws.evaluate(policy)?;
            let get = |k: &str| report.get(k).ok_or_else(|| Error::invalid(format!("report lacks {k}")));
            summary.push(SummaryRow {
                seed: master,
                policy: policy.name().into(),
                mae: get("mae")?,
                ssim: get("ssim")?,
                psnr: get("psnr")?,
                perc: get("perc")?,
            });
            rows.extend(per_sample.into_iter().map(|m: SampleMetrics| CompareRow {
                seed: master,
                policy: m.policy,
                sample_id: m.sample_id,
                mae: m.mae,
                ssim: m.ssim,
                psnr: m.psnr,
                perc: m.perc,
            }));
        }
    }

    let names: Vec<String> = policies.iter().map(|p| p.name().to_string()).collect();
    let (fried, signs) = rank_tests(&rows, &names, &seeds, cfg.compare.alpha)?;
    let outcome = CompareOutcome {
        policies: names,
        seeds,
        rows,
        summary,
        friedman: fried,
        signs,
    };
    write_outputs(&root, &outcome)?;
    write_provenance(&root, cfg, &data_seeds)?;
    Ok(outcome)
}

type RankTables = (Vec<(String, Option<FriedmanResult>)>, Vec<(String, Vec<Vec<i8>>)>);

/// Subjects are test samples; each score is averaged over repetitions.
fn rank_tests(rows: &[CompareRow], policies: &[String], seeds: &[u64], alpha: f64) -> Result<RankTables> {
    let k = policies.len();
    let mut sample_ids: Vec<&str> = rows
        .iter()
        .filter(|r| r.policy == policies[0] && r.seed == seeds[0])
        .map(|r| r.sample_id.as_str())
        .collect();
    sample_ids.dedup();
    let n = sample_ids.len();
    let mut fried = Vec::new();
    let mut signs = Vec::new();
    for (metric, higher_is_better) in STAT_METRICS {
        let mut matrix = vec![vec![0.0; n]; k];
        for r in rows {
            let m = policies.iter().position(|p| *p == r.policy).expect("known policy");
            let s = sample_ids.iter().position(|id| *id == r.sample_id).expect("known sample");
            let v = metric_of(r.mae, r.ssim, r.psnr, r.perc, metric).expect("known metric");
            matrix[m][s] += v / seeds.len() as f64;
        }
        if k < 2 || n < 2 {
            fried.push((metric.to_string(), None));
            signs.push((metric.to_string(), vec![vec![0; k]; k]));
            continue;
        }
        let fr = friedman(&matrix)?;
        let s = if fr.p_value < alpha {
            nemenyi_signs(&matrix, alpha, higher_is_better)?.signs
        } else {
            vec![vec![0; k]; k]
        };
        fried.push((metric.to_string(), Some(fr)));
        signs.push((metric.to_string(), s));
    }
    Ok((fried, signs))
}

fn write_outputs(root: &Path, out: &CompareOutcome) -> Result<()> {
    write_rows(&root.join("per_sample.csv"), &out.rows)?;
    write_rows(&root.join("summary.csv"), &out.summary)?;

    let path = root.join("friedman.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["metric".to_string(), "statistic".into(), "p_value".into()];
    header.extend(out.policies.iter().map(|p| format!("rank_{p}")));
    w.write_record(&header).map_err(csv_err(&path))?;
    for (metric, fr) in &out.friedman {
        let mut rec = vec![metric.clone()];
        match fr {
            Some(fr) => {
                rec.push(fr.statistic.to_string());
                rec.push(fr.p_value.to_string());
                rec.extend(fr.avg_ranks.iter().map(f64::to_string));
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 2 + out.policies.len())),
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    for (metric, matrix) in &out.signs {
        let path = root.join(format!("nemenyi_{metric}.csv"));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["policy".to_string()];
        header.extend(out.policies.iter().cloned());
        w.write_record(&header).map_err(csv_err(&path))?;
        for (p, row) in out.policies.iter().zip(matrix) {
            let mut rec = vec![p.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let path = root.join("signs.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["policy".to_string()];
    header.extend(out.signs.iter().map(|(m, _)| m.clone()));
    header.push("total".into());
    w.write_record(&header).map_err(csv_err(&path))?;
    for (p, per, total) in out.scores() {
        let mut rec = vec![p];
        rec.extend(per.iter().map(i32::to_string));
        rec.push(total.to_string());
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
