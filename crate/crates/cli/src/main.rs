use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use twinlab::data::{generate_toy_dataset, load_dataset, save_dataset, Recipe, RecipeParams};
use twinlab::experiments::{
    ablate, evaluate, gradcheck_suite, report, train_to_dir, Checkpoint, RunConfig, Sweep, Trainer,
    DEFAULT_GRADCHECK_TOL,
};

#[derive(Parser)]
#[command(name = "twinlab", version, about = "Small-scale redundancy-reduction self-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a JSON config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.csv, config.json and checkpoint.btck.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
        /// Stop once this many epochs have completed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Probe and diagnose a checkpoint on a dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Train and probe one run per value of a hyperparameter.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// lambda, batch_size, projector_dim, augmentations, asymmetry or loss_variant.
        #[arg(long)]
        sweep: Sweep,
        /// Comma-separated values; defaults depend on the sweep.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent sweep points (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_GRADCHECK_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts and a tidy CSV from metrics and sweep files.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset file.
    GenData {
        /// shapes, two-moons-images, blobs or gratings.
        #[arg(long)]
        recipe: Recipe,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
            stop_after,
        } => {
            let mut trainer = match (resume, config) {
                (Some(path), _) => {
                    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    Trainer::from_checkpoint(&ckpt)?
                }
                (None, Some(path)) => {
                    let mut cfg = RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    Trainer::new(cfg)?
                }
                (None, None) => bail!("train needs --config or --resume"),
            };
            let out = out.or_else(|| trainer.config.output_dir.clone());
            let outcome = train_to_dir(&mut trainer, out.as_deref(), stop_after)?;
            println!("epoch  loss        offdiag   min_std   probe");
            for r in &outcome.metrics {
                println!(
                    "{:>5}  {:<10.5}  {:<8.5}  {:<8.5}  {}",
                    r.epoch,
                    r.loss_total,
                    r.mean_abs_offdiag,
                    r.min_feature_std,
                    fmt_opt(r.probe_top1)
                );
            }
            if let Some(dir) = out {
                println!("wrote {}", dir.display());
            }
        }
        Command::Evaluate { checkpoint, dataset } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let ds = load_dataset(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let report = evaluate(&ckpt, &ds)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            config,
            sweep,
            values,
            out,
            workers,
        } => {
            let base = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let values = values.unwrap_or_else(|| sweep.default_values());
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let report = ablate(&base, sweep, &values, out.as_deref(), workers)?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck { tol, seed } => {
            let cases = gradcheck_suite(tol, seed)?;
            let mut ok = true;
            for c in &cases {
                ok &= c.report.passed;
                println!(
                    "{:<32} {:>10.3e}  {}",
                    c.name,
                    c.report.worst(),
                    if c.report.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{} of {} checks within tol {tol:e}", cases.iter().filter(|c| c.report.passed).count(), cases.len());
            return Ok(ok);
        }
        Command::Report { input, out } => {
            for path in report(&input, &out)? {
                println!("{}", path.display());
            }
        }
        Command::GenData {
            recipe,
            n,
            seed,
            out,
            side,
            classes,
            noise,
            margin,
        } => {
            let d = RecipeParams::default();
            let params = RecipeParams {
                side: side.unwrap_or(d.side),
                classes: classes.unwrap_or(d.classes),
                noise: noise.unwrap_or(d.noise),
                margin: margin.unwrap_or(d.margin),
            };
            let ds = generate_toy_dataset(recipe, n, seed, &params)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} images ({}×{}×{}) to {}", ds.len(), ds.height, ds.width, ds.channels, out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
