//! Benchmark tasks, their datasets and evaluation.

mod eval;
pub mod metrics;
mod reach;
mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{CondBatch, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub use eval::{evaluate, EvalReport, EvalRow, EvalSettings, ModelPolicy};
pub use reach::{segment_distance, ChunkPolicy, Episode, ExpertPolicy, ReachObservation, ReachTask, Rollout, Side};
pub use toy::ToyDistribution;

/// A benchmark task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    GaussianRing { modes: usize, radius: f64, sigma: f64 },
    TwoMoons { noise: f64 },
    Reach(ReachTask),
}

impl TaskSpec {
    pub fn toy(&self) -> Option<ToyDistribution> {
        match *self {
            Self::GaussianRing { modes, radius, sigma } => Some(ToyDistribution::GaussianRing { modes, radius, sigma }),
            Self::TwoMoons { noise } => Some(ToyDistribution::TwoMoons { noise }),
            Self::Reach(_) => None,
        }
    }

    pub fn reach(&self) -> Option<&ReachTask> {
        match self {
            Self::Reach(r) => Some(r),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Reach(r) => r.validate(),
            _ => self.toy().expect("toy variant").validate(),
        }
    }

    /// Builds the dataset: `n` samples for toy tasks, `n` expert episodes for
    /// reaching.
    pub fn build_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut rng = stream(seed, Purpose::Dataset, 0);
        match self {
            Self::Reach(task) => {
                let mut chunks = Vec::new();
                let mut obs = Vec::new();
                for _ in 0..n {
                    let ep = task.sample_episode(&mut rng);
                    let path = task.expert_path(&ep);
                    for i in 0..path.len() - 1 {
                        chunks.extend(task.expert_chunk(&path, i));
                        obs.push(task.observe(&path, i, ep.goal));
                    }
                }
                let d = 2 * task.horizon;
                let raw = Tensor::new([obs.len(), d], chunks)?;
                let normalizer = Normalizer::fit(&raw)?;
                Ok(Dataset {
                    x1: normalizer.normalize(&raw)?,
                    cond: Some(task.cond_batch(&obs)?),
                    normalizer: Some(normalizer),
                })
            }
            _ => {
                let toy = self.toy().expect("toy variant");
                Ok(Dataset { x1: Tensor::new([n, 2], toy.sample(&mut rng, n))?, cond: None, normalizer: None })
            }
        }
    }

    /// Sets the task-dependent fields of `base` (sample layout and
    /// condition widths).
    pub fn adapt_model(&self, base: &ModelConfig) -> ModelConfig {
        match self {
            Self::Reach(r) => ModelConfig {
                variant: base.variant,
                token_dim: base.token_dim,
                depth: base.depth,
                heads: base.heads,
                ff_mult: base.ff_mult,
                block: base.block,
                branch_order: base.branch_order,
                proprio_route: base.proprio_route,
                proprio_mask_prob: base.proprio_mask_prob,
                cond_token_budget: base.cond_token_budget,
                ..r.model_config(base.token_dim, base.depth, base.heads)
            },
            _ => ModelConfig { ff_mult: base.ff_mult, ..ModelConfig::plain_mlp(2, base.token_dim) },
        }
    }
}

/// Per-dimension affine normalisation to zero mean and unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(x: &Tensor<f32>) -> Result<Self> {
        let [n, d] = x.shape() else { return Err(invalid("normalizer expects [N, D] data")) };
        let (n, d) = (*n, *d);
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for r in x.data().chunks_exact(d) {
            for j in 0..d {
                mean[j] += r[j] as f64;
                sq[j] += (r[j] as f64).powi(2);
            }
        }
        let mean: Vec<f64> = mean.into_iter().map(|m| m / n as f64).collect();
        let std =
            sq.iter().zip(&mean).map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
        Ok(Self { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    fn apply(&self, x: &Tensor<f32>, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor<f32>> {
        let d = self.mean.len();
        if x.shape().last() != Some(&d) {
            return Err(Error::ShapeMismatch { op: "normalizer", lhs: x.shape().to_vec(), rhs: vec![d] });
        }
        let data = x
            .data()
            .chunks_exact(d)
            .flat_map(|r| (0..d).map(move |j| (r[j], j)))
            .map(|(v, j)| f(v, self.mean[j], self.std[j]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn normalize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.apply(x, |v, m, s| v * s + m)
    }
}

/// Training data: target samples `x1` and aligned condition rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, D]`, normalised if `normalizer` is set.
    pub x1: Tensor<f32>,
    pub cond: Option<CondBatch>,
    pub normalizer: Option<Normalizer>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x1.shape()[1]
    }

    /// Rows `idx`.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Option<CondBatch>)> {
        let d = self.dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("row {bad} out of range for {} rows", self.len())));
        }
        let x = Tensor::new([idx.len(), d], idx.iter().flat_map(|&i| self.x1.row(i).iter().copied()).collect())?;
        let cond = self.cond.as_ref().map(|c| c.gather(idx)).transpose()?;
        Ok((x, cond))
    }

    /// `b` rows drawn uniformly with replacement.
    pub fn minibatch<R: Rng + ?Sized>(&self, rng: &mut R, b: usize) -> Result<(Tensor<f32>, Option<CondBatch>)> {
        let n = self.len();
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        self.gather(&idx)
    }
}
