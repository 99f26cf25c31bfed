//! DiT-X stack: AdaLN-Zero modulated self-attention, cross-attention over
//! condition tokens, and feed-forward.

use super::layers::{attention, gated_residual, init_attention, init_linear, linear, mlp2, modulated_norm};
use super::{embed_time, BlockKind, BranchOrder, CondBatch, ModelConfig, ProprioRoute};
use crate::error::{invalid, Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

/// Scale, shift and gate vectors for the three branches of a full DiT-X block.
pub const NUM_MODULATION_VECTORS: usize = 9;

/// `[scale γ, shift β, gate α]`, each `[B, d]`.
pub type BranchModulation = [Var; 3];

/// AdaLN modulation for one block.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub self_attn: BranchModulation,
    /// Absent for blocks whose cross-attention is unmodulated or missing.
    pub cross_attn: Option<BranchModulation>,
    pub ff: BranchModulation,
}

impl Modulation {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.self_attn.to_vec();
        if let Some(c) = self.cross_attn {
            v.extend(c);
        }
        v.extend(self.ff);
        v
    }
}

/// Encoded condition sequence.
#[derive(Debug, Clone)]
pub struct ConditionTokens {
    /// `[B, M, d]`; `None` when the configuration produces no tokens.
    pub tokens: Option<Var>,
    /// Proprioception embedding `[B, d]` when routed through AdaLN.
    pub adaln_proprio: Option<Var>,
    /// Which samples had their proprioception replaced by the null token.
    pub masked: Vec<bool>,
}

fn block_name(i: usize) -> String {
    format!("blk{i:02}")
}

fn modulation_width(block: BlockKind) -> usize {
    match block {
        BlockKind::DitX => NUM_MODULATION_VECTORS,
        BlockKind::CrossUnmodulated | BlockKind::SelfOnly => 6,
    }
}

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<()> {
    let d = cfg.token_dim;
    init_linear(store, "in", cfg.action_dim, d, rng)?;
    store.insert_normal("pos", &[cfg.action_horizon, d], 0.02, rng)?;
    let types = cfg.obs_history + 2;
    store.insert_normal("cond.type", &[types, d], 0.02, rng)?;
    if cfg.obs_dim > 0 {
        init_linear(store, "cond.obs", cfg.obs_dim, d, rng)?;
    }
    if cfg.goal_dim > 0 {
        init_linear(store, "cond.goal", cfg.goal_dim, d, rng)?;
    }
    if cfg.proprio_dim > 0 {
        init_linear(store, "cond.proprio.fc1", cfg.proprio_dim, d, rng)?;
        init_linear(store, "cond.proprio.fc2", d, d, rng)?;
        store.insert_normal("cond.null", &[d], 0.02, rng)?;
    }
    for i in 0..cfg.depth {
        let name = block_name(i);
        // AdaLN-Zero: the modulation projection starts at exactly zero.
        let width = modulation_width(cfg.block) * d;
        store.insert_zeros(format!("{name}.mod.w"), &[d, width])?;
        store.insert_zeros(format!("{name}.mod.b"), &[width])?;
        init_attention(store, &format!("{name}.self"), d, rng)?;
        if cfg.block != BlockKind::SelfOnly {
            init_attention(store, &format!("{name}.cross"), d, rng)?;
        }
        init_linear(store, &format!("{name}.ff.fc1"), d, cfg.ff_mult * d, rng)?;
        init_linear(store, &format!("{name}.ff.fc2"), cfg.ff_mult * d, d, rng)?;
    }
    init_linear(store, "dec.fc1", d, d, rng)?;
    init_linear(store, "dec.fc2", d, cfg.action_dim, rng)
}

fn check_rows(name: &str, t: &Tensor<f32>, rows: usize, width: usize) -> Result<()> {
    if t.shape() != [rows, width] {
        return Err(Error::ShapeMismatch {
            op: match name {
                "obs" => "condition obs",
                "goal" => "condition goal",
                _ => "condition proprio",
            },
            lhs: t.shape().to_vec(),
            rhs: vec![rows, width],
        });
    }
    Ok(())
}

pub(super) fn encode_condition<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cond: &CondBatch,
    mask: Option<&[bool]>,
) -> Result<ConditionTokens> {
    let b = cond.batch_size().ok_or_else(|| invalid("empty condition batch"))?;
    let d = cfg.token_dim;
    let k = cfg.obs_history;
    let types = tape.param(params, "cond.type")?;
    let mut seq: Vec<Var> = Vec::new();

    if cfg.obs_dim > 0 {
        let obs = cond.obs.as_ref().ok_or_else(|| invalid("missing observation input"))?;
        check_rows("obs", obs, b, cfg.obs_width())?;
        let x = tape.input(obs);
        let x = tape.reshape(x, &[b, k, cfg.obs_dim])?;
        let x = linear(tape, params, "cond.obs", x)?;
        let idx: Vec<usize> = (0..k).collect();
        let ty = tape.embedding(types, &idx)?;
        let ty = tape.expand(ty, 0, b)?;
        seq.push(tape.add(x, ty)?);
    }
    let type_row = |tape: &mut Tape<T>, row: usize| -> Result<Var> {
        let e = tape.embedding(types, &[row])?;
        tape.reshape(e, &[d])
    };
    if cfg.goal_dim > 0 {
        let goal = cond.goal.as_ref().ok_or_else(|| invalid("missing goal input"))?;
        check_rows("goal", goal, b, cfg.goal_dim)?;
        let x = tape.input(goal);
        let x = linear(tape, params, "cond.goal", x)?;
        let ty = type_row(tape, k)?;
        let x = tape.add_bias(x, ty)?;
        seq.push(tape.reshape(x, &[b, 1, d])?);
    }
    let mut masked = vec![false; b];
    let mut adaln_proprio = None;
    if cfg.proprio_dim > 0 {
        let p = cond.proprio.as_ref().ok_or_else(|| invalid("missing proprioception input"))?;
        check_rows("proprio", p, b, cfg.proprio_dim)?;
        if let Some(m) = mask {
            if m.len() != b {
                return Err(Error::ShapeMismatch { op: "proprio mask", lhs: vec![m.len()], rhs: vec![b] });
            }
            masked.copy_from_slice(m);
        }
        let x = tape.input(p);
        let x = mlp2(tape, params, "cond.proprio", x)?;
        let m: Vec<T> =
            masked.iter().flat_map(|&mk| std::iter::repeat_n(if mk { T::one() } else { T::zero() }, d)).collect();
        let keep: Vec<T> = m.iter().map(|&v| T::one() - v).collect();
        let m = tape.constant(Tensor::new([b, d], m)?);
        let keep = tape.constant(Tensor::new([b, d], keep)?);
        let null = tape.param(params, "cond.null")?;
        let null = tape.expand(null, 0, b)?;
        let kept = tape.mul(x, keep)?;
        let nulled = tape.mul(null, m)?;
        let x = tape.add(kept, nulled)?;
        let ty = type_row(tape, k + 1)?;
        let x = tape.add_bias(x, ty)?;
        match cfg.proprio_route {
            ProprioRoute::CrossAttention => seq.push(tape.reshape(x, &[b, 1, d])?),
            ProprioRoute::AdaLn => adaln_proprio = Some(x),
        }
    }
    let tokens = match seq.len() {
        0 => None,
        1 => Some(seq[0]),
        _ => Some(tape.concat(&seq, 1)?),
    };
    Ok(ConditionTokens { tokens, adaln_proprio, masked })
}

pub(super) fn action_tokens<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    x_t: Var,
) -> Result<Var> {
    let (h, a, d) = (cfg.action_horizon, cfg.action_dim, cfg.token_dim);
    let b = tape.shape(x_t)[0];
    if tape.shape(x_t) != [b, h * a] {
        return Err(Error::ShapeMismatch { op: "action tokens", lhs: tape.shape(x_t).to_vec(), rhs: vec![b, h * a] });
    }
    let x = tape.reshape(x_t, &[b * h, a])?;
    let x = linear(tape, params, "in", x)?;
    let x = tape.reshape(x, &[b, h, d])?;
    let pos = tape.param(params, "pos")?;
    let pos = tape.expand(pos, 0, b)?;
    tape.add(x, pos)
}

pub(super) fn decode<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    tokens: Var,
) -> Result<Var> {
    let b = tape.shape(tokens)[0];
    let y = mlp2(tape, params, "dec", tokens)?;
    tape.reshape(y, &[b, cfg.sample_dim()])
}

pub(super) fn modulation<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    block: usize,
    c: Var,
) -> Result<Modulation> {
    let d = cfg.token_dim;
    let h = tape.gelu(c);
    let m = linear(tape, params, &format!("{}.mod", block_name(block)), h)?;
    let n = modulation_width(cfg.block);
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        parts.push(tape.slice(m, 1, i * d, d)?);
    }
    let triple = |i: usize| [parts[3 * i], parts[3 * i + 1], parts[3 * i + 2]];
    Ok(if n == NUM_MODULATION_VECTORS {
        Modulation { self_attn: triple(0), cross_attn: Some(triple(1)), ff: triple(2) }
    } else {
        Modulation { self_attn: triple(0), cross_attn: None, ff: triple(1) }
    })
}

pub(super) fn block<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    index: usize,
    mut x: Var,
    cond_tokens: Option<Var>,
    m: &Modulation,
) -> Result<Var> {
    let d = cfg.token_dim;
    let name = block_name(index);
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != d {
        return Err(Error::ShapeMismatch { op: "ditx block tokens", lhs: xs, rhs: vec![0, 0, d] });
    }
    let needs_cross = cfg.block != BlockKind::SelfOnly;
    if needs_cross {
        let c = cond_tokens.ok_or_else(|| invalid("cross-attention needs at least one condition token"))?;
        let cs = tape.shape(c).to_vec();
        if cs.len() != 3 || cs[0] != xs[0] || cs[2] != d {
            return Err(Error::ShapeMismatch { op: "ditx block condition", lhs: xs, rhs: cs });
        }
    }

    let self_branch = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let [g, b, a] = m.self_attn;
        let h = modulated_norm(tape, x, g, b)?;
        let y = attention(tape, params, &format!("{name}.self"), h, h, cfg.heads)?;
        gated_residual(tape, x, y, a)
    };
    let cross_branch = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let Some(c) = cond_tokens else { return Ok(x) };
        match (cfg.block, m.cross_attn) {
            (BlockKind::DitX, Some([g, b, a])) => {
                let h = modulated_norm(tape, x, g, b)?;
                let y = attention(tape, params, &format!("{name}.cross"), h, c, cfg.heads)?;
                gated_residual(tape, x, y, a)
            }
            (BlockKind::CrossUnmodulated, _) => {
                let h = tape.layer_norm(x)?;
                let y = attention(tape, params, &format!("{name}.cross"), h, c, cfg.heads)?;
                tape.add(x, y)
            }
            _ => Err(invalid("DiT-X block is missing its cross-attention modulation")),
        }
    };

    match cfg.branch_order {
        BranchOrder::SelfThenCross => {
            x = self_branch(tape, x)?;
            if needs_cross {
                x = cross_branch(tape, x)?;
            }
        }
        BranchOrder::CrossThenSelf => {
            if needs_cross {
                x = cross_branch(tape, x)?;
            }
            x = self_branch(tape, x)?;
        }
    }
    let [g, b, a] = m.ff;
    let h = modulated_norm(tape, x, g, b)?;
    let y = mlp2(tape, params, &format!("{name}.ff"), h)?;
    gated_residual(tape, x, y, a)
}

pub(super) fn forward<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    x_t: Var,
    t: &[T],
    dt: &[T],
    tokens: &ConditionTokens,
) -> Result<Var> {
    let mut x = action_tokens(cfg, tape, params, x_t)?;
    let mut c = embed_time(tape, params, cfg.token_dim, t, dt)?;
    if let Some(p) = tokens.adaln_proprio {
        c = tape.add(c, p)?;
    }
    if cfg.block == BlockKind::SelfOnly {
        if let Some(seq) = tokens.tokens {
            let pooled = tape.mean_axis(seq, 1)?;
            c = tape.add(c, pooled)?;
        }
    }
    for i in 0..cfg.depth {
        let m = modulation(cfg, tape, params, i, c)?;
        x = block(cfg, tape, params, i, x, tokens.tokens, &m)?;
        if !tape.value(x).all_finite() {
            return Err(Error::NonFinite(format!("DiT-X block {i}")));
        }
    }
    decode(cfg, tape, params, x)
}
