use serde::{Deserialize, Serialize};

use super::metrics::{energy_distance, median_bandwidth, mmd_rbf, mode_fractions};
use super::{ChunkPolicy, Dataset, Normalizer, ReachObservation, ReachTask, Side, TaskSpec};
use crate::error::{invalid, Result};
use crate::inference::{integrate, noise_batch};
use crate::model::VelocityNet;
use crate::rng::{stream, Purpose};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_steps: Vec<usize>,
    /// Generated and reference samples per toy evaluation.
    pub n_samples: usize,
    /// Closed-loop episodes per reaching evaluation.
    pub n_rollouts: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_steps: vec![1, 2, 4, 8, 10], n_samples: 4096, n_rollouts: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub n_steps: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, n_steps: usize, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.n_steps == n_steps && r.metric == metric).map(|r| r.value)
    }

    fn push(&mut self, n_steps: usize, metric: impl Into<String>, value: f64) {
        self.rows.push(EvalRow { n_steps, metric: metric.into(), value });
    }
}

/// Closed-loop policy that samples action chunks from a trained model.
pub struct ModelPolicy<'a> {
    pub model: &'a VelocityNet,
    pub params: &'a ParamStore,
    pub task: &'a ReachTask,
    pub normalizer: &'a Normalizer,
    pub n_steps: usize,
    pub seed: u64,
    calls: u64,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(
        model: &'a VelocityNet,
        params: &'a ParamStore,
        task: &'a ReachTask,
        normalizer: &'a Normalizer,
        n_steps: usize,
        seed: u64,
    ) -> Self {
        Self { model, params, task, normalizer, n_steps, seed, calls: 0 }
    }
}

impl ChunkPolicy for ModelPolicy<'_> {
    fn act(&mut self, idx: &[usize], obs: &[ReachObservation]) -> Result<Vec<Vec<[f64; 2]>>> {
        let cond = self.task.cond_batch(obs)?;
        let d = 2 * self.task.horizon;
        let mut rng = stream(self.seed, Purpose::Rollout, self.calls);
        self.calls += 1;
        let x0 = Tensor::new([idx.len(), d], noise_batch(&mut rng, idx.len(), d))?;
        let x = integrate(self.model, self.params, x0, self.n_steps, Some(&cond))?;
        let x = self.normalizer.denormalize(&x)?;
        Ok(x.data().chunks_exact(d).map(|r| r.chunks_exact(2).map(|p| [p[0] as f64, p[1] as f64]).collect()).collect())
    }
}

/// Evaluates `params` at every step count in `settings`.
///
/// Toy tasks report `energy_distance`, `mmd`, `mode_k` fractions,
/// `min_mode_fraction` and `unassigned`; reaching reports `success_rate`,
/// `collision_rate`, `class_above` and `class_below`.
pub fn evaluate(
    task: &TaskSpec,
    model: &VelocityNet,
    params: &ParamStore,
    data: &Dataset,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport> {
    if settings.n_steps.is_empty() || settings.n_steps.contains(&0) {
        return Err(invalid("evaluation step counts must be ≥ 1"));
    }
    let mut report = EvalReport::default();
    match task {
        TaskSpec::Reach(reach) => {
            let normalizer = data.normalizer.as_ref().ok_or_else(|| invalid("reach dataset lacks a normalizer"))?;
            let mut rng = stream(seed, Purpose::Eval, 0);
            let episodes: Vec<_> = (0..settings.n_rollouts).map(|_| reach.sample_episode(&mut rng)).collect();
            for &n in &settings.n_steps {
                let mut policy = ModelPolicy::new(model, params, reach, normalizer, n, seed);
                let res = reach.rollout_batch(&episodes, &mut policy)?;
                let total = res.len().max(1) as f64;
                let frac = |f: &dyn Fn(&super::Rollout) -> bool| res.iter().filter(|r| f(r)).count() as f64 / total;
                report.push(n, "success_rate", frac(&|r| r.success));
                report.push(n, "collision_rate", frac(&|r| r.collided));
                report.push(n, "class_above", frac(&|r| reach.homotopy_class(&r.path) == Some(Side::Above)));
                report.push(n, "class_below", frac(&|r| reach.homotopy_class(&r.path) == Some(Side::Below)));
            }
        }
        _ => {
            let toy = task.toy().expect("toy variant");
            let m = settings.n_samples;
            let reference = toy.sample(&mut stream(seed, Purpose::Eval, 1), m);
            let x0 = noise_batch(&mut stream(seed, Purpose::Eval, 0), m, 2);
            for &n in &settings.n_steps {
                let x = integrate(model, params, Tensor::new([m, 2], x0.clone())?, n, None)?;
                let gen = x.data();
                report.push(n, "energy_distance", energy_distance(gen, &reference, 2)?);
                let bw = median_bandwidth(gen, &reference, 2)?;
                report.push(n, "mmd", mmd_rbf(gen, &reference, 2, bw)?);
                let labels: Vec<_> = gen.chunks_exact(2).map(|p| toy.assign_mode([p[0] as f64, p[1] as f64])).collect();
                let fr = mode_fractions(&labels, toy.num_modes());
                for (k, f) in fr.iter().enumerate() {
                    report.push(n, format!("mode_{k}"), *f);
                }
                report.push(n, "min_mode_fraction", fr.iter().copied().fold(f64::INFINITY, f64::min));
                report.push(n, "unassigned", 1.0 - fr.iter().sum::<f64>());
            }
        }
    }
    Ok(report)
}
