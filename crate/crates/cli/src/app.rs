//! Command-line front end of the `maniflow` binary.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::metrics::write_report;
use crate::run::{self, RunPaths};
use crate::{plot, verify};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Trains and evaluates velocity models that sample in one or a few steps.
#[derive(Parser)]
#[command(name = "maniflow", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct OutArg {
    /// Output directory; defaults to $MANIFLOW_OUT_DIR, then ./maniflow-out.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint's EMA weights.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated integration step counts.
        #[arg(long, value_delimiter = ',')]
        n_steps: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        n_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write plot-ready CSV files.
    PlotData {
        /// Metrics log of a training run.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Samples container written by `sample`.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Draws per timestep sampler for the histograms.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the quick invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every timestep sampler with continuous and discrete step sizes.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
}

fn out_dir(arg: &OutArg) -> PathBuf {
    arg.out
        .clone()
        .or_else(|| std::env::var_os("MANIFLOW_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("maniflow-out"))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_report(report: &maniflow_core::tasks::EvalReport) {
    for r in &report.rows {
        println!("{:>3} steps  {:<22} {:.6}", r.n_steps, r.metric, r.value);
    }
}

/// Runs one parsed command. `Ok(false)` means it ran but reported a failure.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, checkpoint, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let paths = RunPaths::new(out_dir(&out));
            let outcome = run::train(&cfg, &paths, checkpoint.as_deref())?;
            println!("trained {} steps into {}", outcome.state.step, paths.root.display());
            print_report(&outcome.report);
        }
        Command::Eval { checkpoint, n_steps, seed, out } => {
            let report = run::eval_checkpoint(&checkpoint, n_steps, seed)?;
            let dir = out_dir(&out);
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_report(&dir.join("eval.csv"), &report)?;
            print_report(&report);
        }
        Command::Sample { checkpoint, n, n_steps, seed, out } => {
            let dir = out_dir(&out);
            run::sample(&checkpoint, n, n_steps, seed)?.write(&dir)?;
            println!("wrote {n} samples to {}", dir.display());
        }
        Command::PlotData { metrics, samples, n, seed, out } => {
            if n == 0 {
                bail!("--n must be ≥ 1");
            }
            let dir = out_dir(&out);
            for f in plot::emit(metrics.as_deref(), samples.as_deref(), n, seed, &dir)? {
                println!("{}", dir.join(f).display());
            }
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed);
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&out);
            run::ablate(&cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("ablation.md"))?);
        }
    }
    Ok(true)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<bool>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}
