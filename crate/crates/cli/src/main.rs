use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ganaug::pipeline::{self, parse_policies, HpoObjective, PolicyChoice, RunConfig, OUTPUT_ENV};

/// Configuration remembered between commands that share an output directory.
const SESSION_CONFIG: &str = "run.toml";

#[derive(Parser)]
#[command(name = "ganaug", version, about = "Latent-space augmentation pipeline for paired image translation")]
struct Cli {
    /// TOML run configuration. Without it, `<output>/run.toml` is used when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the configuration.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    output: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset and its split.
    MakeData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        res: Option<usize>,
    },
    /// Train the GAN on the training split.
    TrainGan,
    /// Invert every training image into the latent space.
    Invert,
    /// Run one augmentation pass over the training split.
    Augment {
        #[arg(long)]
        policy: PolicyChoice,
        /// Bundled latent-policy parameters (`mae` or `f1`).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Train the translation network under a policy.
    TrainDownstream {
        #[arg(long)]
        policy: PolicyChoice,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Score the trained translation network on the test split.
    Eval {
        #[arg(long)]
        policy: PolicyChoice,
    },
    /// Search the latent-policy parameters.
    Hpo {
        #[arg(long)]
        objective: Option<Objective>,
    },
    /// Train and score several policies over repeated seeds and rank them.
    Compare {
        /// Comma-separated policy names.
        #[arg(long)]
        policies: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Emit the data behind a figure.
    Report {
        #[arg(long)]
        figure: Figure,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Mae,
    F1,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    PrSweep,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    if cli.config.is_none() {
        let session = cfg.output_dir.join(SESSION_CONFIG);
        if session.exists() {
            let output = cfg.output_dir.clone();
            cfg = RunConfig::load(&session)?;
            cfg.output_dir = output;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn save_session(cfg: &RunConfig) -> Result<()> {
    let path = cfg.output_dir.join(SESSION_CONFIG);
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn with_preset(mut cfg: RunConfig, preset: Option<String>) -> RunConfig {
    if let Some(p) = preset {
        cfg.policy.preset = p;
        cfg.policy.config = None;
    }
    cfg
}

fn show(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::MakeData { n, res } => {
            if let Some(n) = n {
                cfg.data.n_samples = n;
            }
            if let Some(r) = res {
                cfg.data.resolution = r;
            }
            cfg.validate()?;
            let data = pipeline::make_data(&cfg)?;
            save_session(&cfg)?;
            println!("{} samples at {}x{}", data.len(), data.resolution, data.resolution);
            show(&cfg.output_dir.join("data"));
        }
        Command::TrainGan => {
            let model = pipeline::train_gan(&cfg)?;
            println!("GAN at {}x{}", model.resolution(), model.resolution());
            show(&cfg.output_dir.join("gan"));
        }
        Command::Invert => {
            let table = pipeline::invert(&cfg)?;
            let mean = table.final_losses().iter().sum::<f64>() / table.len().max(1) as f64;
            println!("inverted {} images, mean loss {mean:.5}", table.len());
            show(&cfg.output_dir.join("inversion"));
        }
        Command::Augment { policy, preset } => {
            let cfg = with_preset(cfg, preset);
            let s = pipeline::augment(&cfg, policy)?;
            println!("{}: {} of {} samples augmented", s.policy, s.augmented, s.samples);
            show(&s.output);
        }
        Command::TrainDownstream { policy, preset } => {
            let cfg = with_preset(cfg, preset);
            let out = pipeline::train_downstream(&cfg, policy)?;
            if let Some(last) = out.log.last() {
                println!("{policy}: final L1 {:.5}", last.l1);
            }
            show(&cfg.output_dir.join("downstream").join(policy.name()));
        }
        Command::Eval { policy } => {
            let report = pipeline::evaluate(&cfg, policy)?;
            for key in ["mae", "ssim", "psnr", "perc"] {
                if let Some(v) = report.get(key) {
                    println!("{key} {v:.6}");
                }
            }
            show(&cfg.output_dir.join("eval").join(policy.name()));
        }
        Command::Hpo { objective } => {
            if let Some(o) = objective {
                cfg.hpo.objective = match o {
                    Objective::Mae => HpoObjective::Mae,
                    Objective::F1 => HpoObjective::F1,
                };
            }
            let best = pipeline::hpo(&cfg)?;
            println!(
                "best: alpha_f {} alpha_pix {} alpha_perc {} alpha_lat {} steps {} lr {} p_aug {}",
                best.alpha_f, best.alpha_pix, best.alpha_perc, best.alpha_lat, best.steps, best.lr, best.p_aug
            );
            show(&cfg.output_dir.join("hpo"));
        }
        Command::Compare { policies, seeds } => {
            let list = policies.unwrap_or_else(|| cfg.compare.policies.join(","));
            let policies = parse_policies(&list)?;
            let seeds = seeds.unwrap_or(cfg.compare.seeds);
            if seeds == 0 {
                bail!("--seeds must be positive");
            }
            let out = pipeline::compare(&cfg, &policies, seeds)?;
            println!("policy,mae,ssim,psnr,perc,total");
            for (p, per, total) in out.scores() {
                let per: Vec<String> = per.iter().map(i32::to_string).collect();
                println!("{p},{},{total}", per.join(","));
            }
            show(&cfg.output_dir.join("compare"));
        }
        Command::Report { figure: Figure::PrSweep } => {
            let rows = pipeline::pr_sweep(&cfg)?;
            for r in rows.iter().filter(|r| r.view == "joint") {
                println!("{} {:12} precision {:.3} recall {:.3}", r.config, r.policy, r.precision, r.recall);
            }
            show(&cfg.output_dir.join("report/pr_sweep.csv"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
