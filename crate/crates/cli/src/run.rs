//! Training, evaluation, sampling and the scheduler ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use maniflow_core::inference::{integrate, noise_batch};
use maniflow_core::rng::{stream, Purpose};
use maniflow_core::tasks::{evaluate, Dataset, EvalReport, EvalSettings, TaskSpec};
use maniflow_core::tensor::Tensor;
use maniflow_core::time_sampling::{StepSizeMode, TimeSamplerSpec};
use maniflow_core::train::TrainState;
use maniflow_core::Error;
use serde_json::json;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::container::Container;
use crate::metrics::{write_report, MetricsLog};

/// Files a training run writes under its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn halt(&self) -> PathBuf {
        self.root.join("halt.json")
    }
}

pub fn dataset_container(data: &Dataset) -> Result<Container> {
    let meta = match &data.normalizer {
        Some(n) => json!({ "rows": data.len(), "normalizer": { "mean": n.mean, "std": n.std } }),
        None => json!({ "rows": data.len() }),
    };
    let mut c = Container::new("dataset", meta);
    c.push("x1", data.x1.shape(), data.x1.data())?;
    if let Some(cond) = &data.cond {
        for (name, t) in [("cond.obs", &cond.obs), ("cond.goal", &cond.goal), ("cond.proprio", &cond.proprio)] {
            if let Some(t) = t {
                c.push(name, t.shape(), t.data())?;
            }
        }
    }
    Ok(c)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: EvalReport,
}

fn run_eval(cfg: &ExperimentConfig, state: &TrainState, data: &Dataset, settings: &EvalSettings) -> Result<EvalReport> {
    Ok(evaluate(&cfg.task, &state.model, state.ema.params(), data, settings, cfg.eval.seed)?)
}

/// Runs (or resumes) training into `paths`, evaluating the EMA weights at the
/// configured cadence and at the end.
///
/// A non-finite gradient saves the last good state, writes `halt.json` and
/// returns an error.
pub fn train(cfg: &ExperimentConfig, paths: &RunPaths, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut state, mut log) = match resume {
        Some(dir) => {
            let (mut saved, state) = checkpoint::load(dir)?;
            // Only the step budget may change between segments of one run.
            saved.train.total_steps = cfg.train.total_steps;
            if saved != *cfg {
                bail!("checkpoint {} was written with a different configuration", dir.display());
            }
            ensure!(state.step <= cfg.train.total_steps, "checkpoint is already past total_steps");
            fs::create_dir_all(&paths.root)?;
            let log = MetricsLog::resume(&paths.metrics(), state.step)?;
            (state, log)
        }
        None => {
            let state = TrainState::new(cfg.model_config(), &cfg.train, cfg.seed)?;
            fs::create_dir_all(&paths.root).with_context(|| format!("creating {}", paths.root.display()))?;
            (state, MetricsLog::create(&paths.metrics())?)
        }
    };
    let data = cfg.task.build_dataset(cfg.dataset_size, cfg.seed)?;
    dataset_container(&data)?.write(&paths.dataset())?;
    let settings = cfg.eval.settings();
    let total = cfg.train.total_steps;
    let mut last_eval = None;
    while state.step < total {
        let stats = match state.step(&cfg.train, &data) {
            Ok(s) => s,
            Err(Error::NonFinite(what)) => {
                log.flush()?;
                checkpoint::save(&paths.checkpoint(), cfg, &state)?;
                let diag = json!({ "step": state.step, "error": format!("non-finite {what}") });
                fs::write(paths.halt(), serde_json::to_string_pretty(&diag)? + "\n")?;
                bail!(
                    "non-finite {what}; saved the state before step {} to {}",
                    state.step + 1,
                    paths.checkpoint().display()
                );
            }
            Err(e) => return Err(e.into()),
        };
        if stats.step % cfg.log_every == 0 || stats.step == total || stats.step == 1 {
            log.log_train(&stats)?;
        }
        if cfg.eval.every > 0 && stats.step % cfg.eval.every == 0 {
            let r = run_eval(cfg, &state, &data, &settings)?;
            log.log_eval(stats.step, &r)?;
            last_eval = Some((stats.step, r));
        }
        if cfg.checkpoint_every > 0 && stats.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            checkpoint::save(&paths.checkpoint(), cfg, &state)?;
        }
    }
    let report = match last_eval {
        Some((s, r)) if s == state.step => r,
        _ => {
            let r = run_eval(cfg, &state, &data, &settings)?;
            log.log_eval(state.step, &r)?;
            r
        }
    };
    log.flush()?;
    checkpoint::save(&paths.checkpoint(), cfg, &state)?;
    write_report(&paths.eval(), &report)?;
    Ok(TrainOutcome { state, report })
}

/// Re-evaluates a checkpoint, optionally with other step counts or seed.
pub fn eval_checkpoint(dir: &Path, n_steps: Option<Vec<usize>>, seed: Option<u64>) -> Result<EvalReport> {
    let (mut cfg, state) = checkpoint::load(dir)?;
    if let Some(n) = n_steps {
        cfg.eval.n_steps = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    let data = cfg.task.build_dataset(cfg.dataset_size, cfg.seed)?;
    run_eval(&cfg, &state, &data, &cfg.eval.settings())
}

/// Draws `n` samples from the EMA weights. Conditional tasks cycle through
/// the dataset's condition rows; reaching chunks are returned in world units.
pub fn sample(dir: &Path, n: usize, n_steps: usize, seed: u64) -> Result<Container> {
    ensure!(n_steps >= 1, "n_steps must be ≥ 1");
    let (cfg, state) = checkpoint::load(dir)?;
    let dim = cfg.model_config().sample_dim();
    let meta = json!({ "n": n, "n_steps": n_steps, "seed": seed, "step": state.step, "task": cfg.task });
    let mut c = Container::new("samples", meta);
    if n == 0 {
        c.push("samples", &[0, dim], &[])?;
        return Ok(c);
    }
    let data = cfg.task.build_dataset(cfg.dataset_size, cfg.seed)?;
    let cond = match &data.cond {
        Some(cb) => {
            let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
            Some(cb.gather(&idx)?)
        }
        None => None,
    };
    let x0 = Tensor::new([n, dim], noise_batch(&mut stream(seed, Purpose::Sample, 0), n, dim))?;
    let mut x = integrate(&state.model, state.ema.params(), x0, n_steps, cond.as_ref())?;
    if let Some(norm) = &data.normalizer {
        x = norm.denormalize(&x)?;
    }
    c.push("samples", &[n, dim], x.data())?;
    if let Some(cb) = &cond {
        for (name, t) in [("cond.obs", &cb.obs), ("cond.goal", &cb.goal), ("cond.proprio", &cb.proprio)] {
            if let Some(t) = t {
                c.push(name, t.shape(), t.data())?;
            }
        }
    }
    Ok(c)
}

/// One cell of the scheduler ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub sampler: TimeSamplerSpec,
    pub dt_mode: StepSizeMode,
    pub report: EvalReport,
}

pub fn dt_mode_name(m: StepSizeMode) -> &'static str {
    match m {
        StepSizeMode::Continuous => "continuous",
        StepSizeMode::Discrete => "discrete",
    }
}

/// Trains every flow-matching timestep sampler with continuous and discrete
/// step sizes from `base`, one run directory per cell.
pub fn ablate(base: &ExperimentConfig, root: &Path) -> Result<Vec<AblationCell>> {
    base.validate()?;
    let mut cells = Vec::new();
    for sampler in TimeSamplerSpec::ALL_DEFAULTS {
        for dt_mode in [StepSizeMode::Continuous, StepSizeMode::Discrete] {
            let mut cfg = base.clone();
            cfg.train.fm_time = sampler;
            cfg.train.consistency.dt_mode = dt_mode;
            let paths = RunPaths::new(root.join(format!("{}_{}", sampler.name(), dt_mode_name(dt_mode))));
            let out = train(&cfg, &paths, None)?;
            cells.push(AblationCell { sampler, dt_mode, report: out.report });
        }
    }
    fs::write(root.join("ablation.csv"), ablation_csv(&cells))?;
    fs::write(root.join("ablation.md"), ablation_table(&cells, headline_metric(&base.task)))?;
    Ok(cells)
}

pub fn headline_metric(task: &TaskSpec) -> &'static str {
    match task {
        TaskSpec::Reach(_) => "success_rate",
        _ => "energy_distance",
    }
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = String::from("fm_time,dt_mode,n_steps,metric,value\n");
    for c in cells {
        for r in &c.report.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.sampler.name(),
                dt_mode_name(c.dt_mode),
                r.n_steps,
                r.metric,
                r.value
            ));
        }
    }
    s
}

/// Markdown table of `metric`: one row per cell, one column per step count.
pub fn ablation_table(cells: &[AblationCell], metric: &str) -> String {
    let mut steps: Vec<usize> = cells.iter().flat_map(|c| c.report.rows.iter().map(|r| r.n_steps)).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut s =
        format!("| fm_time | dt_mode |{}\n", steps.iter().map(|n| format!(" {metric} @{n} |")).collect::<String>());
    s.push_str(&format!("|---|---|{}\n", "---|".repeat(steps.len())));
    for c in cells {
        s.push_str(&format!("| {} | {} |", c.sampler.name(), dt_mode_name(c.dt_mode)));
        for &n in &steps {
            match c.report.get(n, metric) {
                Some(v) => s.push_str(&format!(" {v:.4} |")),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}
