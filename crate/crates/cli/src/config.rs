//! Experiment configuration, loaded from TOML.

use std::path::Path;

use anyhow::{bail, Context, Result};
use maniflow_core::model::ModelConfig;
use maniflow_core::tasks::{EvalSettings, TaskSpec};
use maniflow_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_steps: Vec<usize>,
    pub n_samples: usize,
    pub n_rollouts: usize,
    /// Evaluate every this many steps during training (0: only at the end).
    pub every: u64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self { n_steps: s.n_steps, n_samples: s.n_samples, n_rollouts: s.n_rollouts, every: 0, seed: 1234 }
    }
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings { n_steps: self.n_steps.clone(), n_samples: self.n_samples, n_rollouts: self.n_rollouts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSpec,
    /// Toy samples, or expert episodes for reaching.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    /// Width, depth and block options; input and condition sizes come from
    /// the task.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Training rows are logged every this many steps.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// 0 writes a checkpoint only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_dataset_size() -> usize {
    20_000
}

fn default_log_every() -> u64 {
    100
}

fn unknown_key(raw: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in raw {
        let path = format!("{prefix}{k}");
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(r), Some(toml::Value::Table(n))) => {
                if let Some(p) = unknown_key(r, n, &format!("{path}.")) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing config")?;
        // serde does not reject unknown keys inside tagged enums, so compare
        // the input against what the parsed config writes back.
        let raw: toml::Table = toml::from_str(text)?;
        let known: toml::Table = toml::from_str(&cfg.to_toml()?)?;
        if let Some(key) = unknown_key(&raw, &known, "") {
            bail!("unknown config key {key}");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The network configuration actually trained.
    pub fn model_config(&self) -> ModelConfig {
        self.task.adapt_model(&self.model)
    }

    /// Checks every section; nothing is allocated before this passes.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.dataset_size == 0 {
            bail!("dataset_size must be ≥ 1");
        }
        if self.log_every == 0 {
            bail!("log_every must be ≥ 1");
        }
        let e = &self.eval;
        if e.n_steps.is_empty() || e.n_steps.contains(&0) {
            bail!("eval.n_steps must be a non-empty list of positive step counts");
        }
        match self.task {
            TaskSpec::Reach(_) if e.n_rollouts == 0 => bail!("eval.n_rollouts must be ≥ 1"),
            TaskSpec::Reach(_) => {}
            _ if e.n_samples == 0 => bail!("eval.n_samples must be ≥ 1"),
            _ => {}
        }
        Ok(())
    }
}
