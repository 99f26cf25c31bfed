use super::layers::{init_linear, linear};
use super::{embed_time, ModelConfig};
use crate::error::Result;
use crate::rng::StreamRng;
use crate::tensor::{ParamStore, Real, Tape, Var};

const HIDDEN_LAYERS: usize = 3;

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<()> {
    let (io, w) = (cfg.sample_dim(), cfg.token_dim);
    init_linear(store, "mlp.fc1", io + w, w, rng)?;
    for i in 2..=HIDDEN_LAYERS {
        init_linear(store, &format!("mlp.fc{i}"), w, w, rng)?;
    }
    init_linear(store, "mlp.out", w, io, rng)
}

/// `[x_t, embed_time(t, Δt)]` through three GELU hidden layers.
pub(super) fn forward<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    x_t: Var,
    t: &[T],
    dt: &[T],
) -> Result<Var> {
    let e = embed_time(tape, params, cfg.token_dim, t, dt)?;
    let mut h = tape.concat(&[x_t, e], 1)?;
    for i in 1..=HIDDEN_LAYERS {
        h = linear(tape, params, &format!("mlp.fc{i}"), h)?;
        h = tape.gelu(h);
    }
    linear(tape, params, "mlp.out", h)
}
