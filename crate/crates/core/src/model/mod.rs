//! Conditional velocity networks `v(x_t, t, Δt | condition)`.
//!
//! Two variants share the time/step-size embedding:
//! * [`Variant::DitX`]: action tokens processed by a stack of DiT-X blocks
//!   whose self-attention, cross-attention and feed-forward branches are all
//!   AdaLN-Zero modulated, followed by a 2-layer action decoder.
//! * [`Variant::PlainMlp`]: a 3-hidden-layer MLP for unconditional toy
//!   distributions.

mod ditx;
mod layers;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub use ditx::{ConditionTokens, Modulation, NUM_MODULATION_VECTORS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DitX,
    PlainMlp,
}

/// Block design, for the architecture ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Self-attention, cross-attention and feed-forward all modulated.
    DitX,
    /// Cross-attention on plainly normalised tokens with an ungated residual.
    CrossUnmodulated,
    /// No cross-attention; pooled condition tokens join the time embedding.
    SelfOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchOrder {
    SelfThenCross,
    CrossThenSelf,
}

/// Where the proprioception embedding enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProprioRoute {
    /// As a condition token seen through cross-attention.
    CrossAttention,
    /// Summed into the AdaLN conditioning vector.
    AdaLn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Token width `d` (hidden width of the plain MLP).
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Action horizon `H`.
    pub action_horizon: usize,
    /// Action dimension `A`.
    pub action_dim: usize,
    /// Observation history `K`.
    pub obs_history: usize,
    /// Observation features per history step; 0 disables observation tokens.
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub proprio_dim: usize,
    pub cond_token_budget: usize,
    /// Probability of replacing the proprioception token during training.
    pub proprio_mask_prob: f64,
    pub ff_mult: usize,
    pub block: BlockKind,
    pub branch_order: BranchOrder,
    pub proprio_route: ProprioRoute,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DitX,
            token_dim: 128,
            depth: 4,
            heads: 4,
            action_horizon: 4,
            action_dim: 2,
            obs_history: 2,
            obs_dim: 2,
            goal_dim: 2,
            proprio_dim: 2,
            cond_token_budget: 8,
            proprio_mask_prob: 0.25,
            ff_mult: 4,
            block: BlockKind::DitX,
            branch_order: BranchOrder::SelfThenCross,
            proprio_route: ProprioRoute::CrossAttention,
        }
    }
}

impl ModelConfig {
    /// Plain MLP for unconditional samples of dimension `dim`.
    pub fn plain_mlp(dim: usize, hidden: usize) -> Self {
        Self {
            variant: Variant::PlainMlp,
            token_dim: hidden,
            depth: 0,
            heads: 1,
            action_horizon: 1,
            action_dim: dim,
            obs_history: 0,
            obs_dim: 0,
            goal_dim: 0,
            proprio_dim: 0,
            proprio_mask_prob: 0.0,
            ..Self::default()
        }
    }

    /// Flattened sample width `H · A`.
    pub fn sample_dim(&self) -> usize {
        self.action_horizon * self.action_dim
    }

    pub fn is_conditional(&self) -> bool {
        self.obs_width() + self.goal_dim + self.proprio_dim > 0
    }

    pub fn obs_width(&self) -> usize {
        self.obs_history * self.obs_dim
    }

    /// Number of condition tokens fed to cross-attention.
    pub fn cond_tokens(&self) -> usize {
        let obs = if self.obs_dim > 0 { self.obs_history } else { 0 };
        let goal = usize::from(self.goal_dim > 0);
        let proprio = usize::from(self.proprio_dim > 0 && self.proprio_route == ProprioRoute::CrossAttention);
        obs + goal + proprio
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.token_dim;
        if d == 0 || !d.is_multiple_of(4) {
            return Err(invalid(format!("token_dim must be a positive multiple of 4, got {d}")));
        }
        if self.action_horizon == 0 || self.action_dim == 0 {
            return Err(invalid("action horizon and dimension must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.proprio_mask_prob) {
            return Err(invalid(format!("proprio_mask_prob must lie in [0, 1], got {}", self.proprio_mask_prob)));
        }
        match self.variant {
            Variant::PlainMlp => {
                if self.is_conditional() {
                    return Err(invalid("the plain MLP variant is unconditional"));
                }
            }
            Variant::DitX => {
                if self.heads == 0 || !d.is_multiple_of(self.heads) {
                    return Err(invalid(format!("token_dim {d} is not divisible by heads {}", self.heads)));
                }
                if self.depth == 0 || self.ff_mult == 0 {
                    return Err(invalid("DiT-X needs depth ≥ 1 and ff_mult ≥ 1"));
                }
                if self.obs_dim > 0 && self.obs_history == 0 {
                    return Err(invalid("observation tokens need obs_history ≥ 1"));
                }
                let n = self.cond_tokens();
                if n == 0 && self.block != BlockKind::SelfOnly {
                    return Err(invalid("cross-attention needs at least one condition token"));
                }
                if n > self.cond_token_budget {
                    return Err(invalid(format!(
                        "{n} condition tokens exceed the budget of {}",
                        self.cond_token_budget
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-sample conditioning inputs, rows aligned with the action batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CondBatch {
    /// `[B, K · obs_dim]`, oldest history step first.
    pub obs: Option<Tensor<f32>>,
    /// `[B, goal_dim]`.
    pub goal: Option<Tensor<f32>>,
    /// `[B, proprio_dim]`.
    pub proprio: Option<Tensor<f32>>,
}

impl CondBatch {
    pub fn batch_size(&self) -> Option<usize> {
        [&self.obs, &self.goal, &self.proprio].into_iter().flatten().map(|t| t.shape()[0]).next()
    }

    /// Rows `idx` of every field, in order.
    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Option<Tensor<f32>>| -> Result<Option<Tensor<f32>>> {
            t.as_ref()
                .map(|t| {
                    let w = t.shape()[1];
                    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                    Tensor::new([idx.len(), w], data)
                })
                .transpose()
        };
        Ok(Self { obs: pick(&self.obs)?, goal: pick(&self.goal)?, proprio: pick(&self.proprio)? })
    }

    /// Stacks several batches row-wise.
    pub fn concat(parts: &[&CondBatch]) -> Result<Self> {
        let cat = |f: fn(&CondBatch) -> &Option<Tensor<f32>>| -> Result<Option<Tensor<f32>>> {
            let fields: Vec<_> = parts.iter().map(|p| f(p)).collect();
            if fields.iter().all(|x| x.is_none()) {
                return Ok(None);
            }
            let mut rows = 0;
            let mut w = None;
            let mut data = Vec::new();
            for t in fields {
                let t = t.as_ref().ok_or_else(|| invalid("condition fields differ"))?;
                if *w.get_or_insert(t.shape()[1]) != t.shape()[1] {
                    return Err(invalid("condition widths differ"));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            Ok(Some(Tensor::new([rows, w.unwrap_or(1)], data)?))
        };
        Ok(Self { obs: cat(|c| &c.obs)?, goal: cat(|c| &c.goal)?, proprio: cat(|c| &c.proprio)? })
    }
}

/// One velocity evaluation request for a batch of `B` samples.
pub struct VelocityQuery<'a, T: Real> {
    /// `[B, H · A]`.
    pub x_t: Var,
    pub t: &'a [T],
    pub dt: &'a [T],
    pub cond: Option<&'a CondBatch>,
    /// Per-sample proprioception masking (training only); `None` disables it.
    pub proprio_mask: Option<&'a [bool]>,
}

/// Anything that predicts velocities on a tape.
pub trait VelocityModel {
    /// Shape `[H, A]` of one generated sample.
    fn chunk_shape(&self) -> [usize; 2];

    fn velocity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        query: &VelocityQuery<'_, T>,
    ) -> Result<Var>;

    /// Probability with which training masks the proprioception token.
    fn proprio_mask_prob(&self) -> f64 {
        0.0
    }
}

/// Velocity network of either variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    config: ModelConfig,
}

impl VelocityNet {
    /// Validates `config` and draws initial parameters.
    pub fn init(config: ModelConfig, rng: &mut StreamRng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        init_time_embedding(&mut store, config.token_dim, rng)?;
        match config.variant {
            Variant::PlainMlp => mlp::init(&config, &mut store, rng)?,
            Variant::DitX => ditx::init(&config, &mut store, rng)?,
        }
        Ok((Self { config }, store))
    }

    /// Wraps an existing parameter set (e.g. from a checkpoint).
    pub fn from_config(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Time/step-size embedding `[B, d]`.
    pub fn embed_time<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, t: &[T], dt: &[T]) -> Result<Var> {
        embed_time(tape, params, self.config.token_dim, t, dt)
    }

    /// Condition tokens `[B, M, d]`, with the proprioception token replaced
    /// by the learned null token wherever `mask` is set.
    pub fn encode_condition<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        cond: &CondBatch,
        mask: Option<&[bool]>,
    ) -> Result<ConditionTokens> {
        ditx::encode_condition(&self.config, tape, params, cond, mask)
    }

    /// Runs the DiT-X stack on externally supplied condition tokens.
    pub fn forward_with_tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        x_t: Var,
        t: &[T],
        dt: &[T],
        tokens: &ConditionTokens,
    ) -> Result<Var> {
        ditx::forward(&self.config, tape, params, x_t, t, dt, tokens)
    }

    /// Action tokens after the input projection and positional encoding,
    /// before any block: `[B, H, d]`.
    pub fn action_tokens<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x_t: Var) -> Result<Var> {
        ditx::action_tokens(&self.config, tape, params, x_t)
    }

    /// Decoder applied to action tokens `[B, H, d]`, giving `[B, H · A]`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, tokens: Var) -> Result<Var> {
        ditx::decode(&self.config, tape, params, tokens)
    }

    /// Per-block AdaLN modulation from a conditioning vector `[B, d]`.
    pub fn modulation<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        block: usize,
        c: Var,
    ) -> Result<Modulation> {
        ditx::modulation(&self.config, tape, params, block, c)
    }

    /// One DiT-X block over action tokens `[B, H, d]`.
    pub fn ditx_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        block: usize,
        x: Var,
        cond_tokens: Option<Var>,
        modulation: &Modulation,
    ) -> Result<Var> {
        ditx::block(&self.config, tape, params, block, x, cond_tokens, modulation)
    }
}

impl VelocityModel for VelocityNet {
    fn chunk_shape(&self) -> [usize; 2] {
        [self.config.action_horizon, self.config.action_dim]
    }

    fn velocity<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, q: &VelocityQuery<'_, T>) -> Result<Var> {
        let b = tape.shape(q.x_t)[0];
        if tape.shape(q.x_t) != [b, self.config.sample_dim()] || q.t.len() != b || q.dt.len() != b {
            return Err(Error::ShapeMismatch {
                op: "velocity input",
                lhs: tape.shape(q.x_t).to_vec(),
                rhs: vec![q.t.len(), self.config.sample_dim()],
            });
        }
        let v = match self.config.variant {
            Variant::PlainMlp => mlp::forward(&self.config, tape, params, q.x_t, q.t, q.dt)?,
            Variant::DitX => {
                let cond = q.cond.ok_or_else(|| invalid("DiT-X model needs condition inputs"))?;
                let tokens = self.encode_condition(tape, params, cond, q.proprio_mask)?;
                self.forward_with_tokens(tape, params, q.x_t, q.t, q.dt, &tokens)?
            }
        };
        if !tape.value(v).all_finite() {
            return Err(Error::NonFinite("velocity output".into()));
        }
        Ok(v)
    }

    fn proprio_mask_prob(&self) -> f64 {
        if self.config.proprio_dim > 0 {
            self.config.proprio_mask_prob
        } else {
            0.0
        }
    }
}

/// Independent Bernoulli(`p`) proprioception masks.
pub fn draw_proprio_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

fn init_time_embedding(store: &mut ParamStore, d: usize, rng: &mut StreamRng) -> Result<()> {
    layers::init_linear(store, "time.fc1", d, d, rng)?;
    layers::init_linear(store, "time.fc2", d, d, rng)
}

/// Sinusoidal features of `t` and of `Δt` (d/2 each), concatenated and
/// passed through a 2-layer MLP.
fn embed_time<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, d: usize, t: &[T], dt: &[T]) -> Result<Var> {
    if t.len() != dt.len() {
        return Err(Error::ShapeMismatch { op: "embed_time", lhs: vec![t.len()], rhs: vec![dt.len()] });
    }
    let ft = tape.sinusoidal(t, d / 2)?;
    let fdt = tape.sinusoidal(dt, d / 2)?;
    let f = tape.concat(&[ft, fdt], 1)?;
    layers::mlp2(tape, params, "time", f)
}
