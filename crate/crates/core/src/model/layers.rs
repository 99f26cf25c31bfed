//! Small building blocks shared by the networks.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Real, Tape, Var};

/// Registers `{name}.w` (`[in, out]`, Xavier) and `{name}.b` (zeros).
pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert_xavier(format!("{name}.w"), fan_in, fan_out, rng)?;
    store.insert_zeros(format!("{name}.b"), &[fan_out])
}

/// Affine map over the last axis of `x`.
pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    let shape = tape.shape(x).to_vec();
    let fan_in = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / fan_in.max(1);
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, fan_in])? };
    let y = tape.matmul(flat, w)?;
    let y = tape.add_bias(y, b)?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank ≥ 1") = tape.shape(y)[1];
    tape.reshape(y, &out_shape)
}

/// `fc2(gelu(fc1(x)))`.
pub(crate) fn mlp2<T: Real>(tape: &mut Tape<T>, params: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, params, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, params, &format!("{name}.fc2"), h)
}

pub(crate) fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{p}"), d, d, rng)?;
    }
    Ok(())
}

/// Multi-head attention: queries from `q_src` `[B, Nq, d]`, keys and values
/// from `kv_src` `[B, Nk, d]`. No masking and no positional terms, so the
/// result is invariant to permutations of the key/value tokens.
pub(crate) fn attention<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    name: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<Var> {
    let (b, nq, d) = match *tape.shape(q_src) {
        [b, n, d] => (b, n, d),
        ref s => return Err(crate::Error::InvalidShape(format!("attention queries {s:?}"))),
    };
    let nk = tape.shape(kv_src)[1];
    let dh = d / heads;
    let q = linear(tape, params, &format!("{name}.q"), q_src)?;
    let k = linear(tape, params, &format!("{name}.k"), kv_src)?;
    let v = linear(tape, params, &format!("{name}.v"), kv_src)?;
    let split = |tape: &mut Tape<T>, x: Var, n: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, n, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, n, dh])
    };
    let q = split(tape, q, nq)?;
    let k = split(tape, k, nk)?;
    let v = split(tape, v, nk)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let weights = tape.softmax(scores)?;
    let out = tape.matmul(weights, v)?;
    let out = tape.reshape(out, &[b, heads, nq, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[b, nq, d])?;
    linear(tape, params, &format!("{name}.o"), out)
}

/// `layer_norm(x) · (1 + scale) + shift`, with `scale`/`shift` of shape
/// `[B, d]` applied to every token of `x` `[B, N, d]`.
pub(crate) fn modulated_norm<T: Real>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let h = tape.layer_norm(x)?;
    let s = tape.add_scalar(scale, T::one());
    let s = tape.expand(s, 1, n)?;
    let h = tape.mul(h, s)?;
    let sh = tape.expand(shift, 1, n)?;
    tape.add(h, sh)
}

/// `x + gate ⊙ branch`, gate `[B, d]` broadcast over tokens.
pub(crate) fn gated_residual<T: Real>(tape: &mut Tape<T>, x: Var, branch: Var, gate: Var) -> Result<Var> {
    let n = tape.shape(x)[1];
    let g = tape.expand(gate, 1, n)?;
    let gb = tape.mul(branch, g)?;
    tape.add(x, gb)
}
