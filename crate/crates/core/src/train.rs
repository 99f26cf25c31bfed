//! Optimisation loop: joint batches, Adam on the live parameters, EMA anchor.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::{joint_loss, EmaShadow, JointBatch, JointBatchPlan};
use crate::model::{ModelConfig, VelocityModel, VelocityNet};
use crate::rng::{stream, Purpose};
use crate::tasks::Dataset;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape};
use crate::time_sampling::{ConsistencyTimeSpec, TimeSamplerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Share of each batch trained with plain flow matching.
    pub fm_fraction: f64,
    pub fm_time: TimeSamplerSpec,
    pub consistency: ConsistencyTimeSpec,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub total_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            fm_fraction: 0.75,
            fm_time: TimeSamplerSpec::DEFAULT_BETA,
            consistency: ConsistencyTimeSpec::default(),
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            total_steps: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn plan(&self) -> JointBatchPlan {
        JointBatchPlan { batch_size: self.batch_size, fm_fraction: self.fm_fraction }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        self.fm_time.validate()?;
        self.consistency.validate()?;
        self.adam.validate()?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Losses and gradient norm of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub fm_loss: Option<f64>,
    pub ct_loss: Option<f64>,
    pub joint_loss: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: VelocityNet,
    pub params: ParamStore,
    pub ema: EmaShadow,
    pub adam: AdamState,
    /// Completed optimisation steps.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = VelocityNet::init(model, &mut stream(seed, Purpose::Init, 0))?;
        let ema = EmaShadow::new(&params, cfg.ema_decay)?;
        let adam = AdamState::new(cfg.adam, &params);
        Ok(Self { model, params, ema, adam, step: 0, seed })
    }

    /// One step. Its randomness depends only on `(seed, step)`.
    pub fn step(&mut self, cfg: &TrainConfig, data: &Dataset) -> Result<StepStats> {
        let mut rng = stream(self.seed, Purpose::Batch, self.step);
        let (x1, cond) = data.minibatch(&mut rng, cfg.batch_size)?;
        let batch = JointBatch::sample(
            &cfg.plan(),
            &cfg.fm_time,
            &cfg.consistency,
            &x1,
            cond.as_ref(),
            self.model.proprio_mask_prob(),
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let jl = joint_loss(&self.model, &mut tape, &self.params, self.ema.params(), &batch, &cfg.consistency)?;
        self.params.clear_grads();
        tape.backward_into(jl.loss, &mut self.params)?;
        let grad_norm = self.params.grad_norm();
        if !grad_norm.is_finite() {
            return Err(crate::Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        self.adam.step(&mut self.params)?;
        self.ema.update(&self.params)?;
        self.step += 1;
        Ok(StepStats { step: self.step, fm_loss: jl.fm, ct_loss: jl.ct, joint_loss: jl.value, grad_norm })
    }
}
