//! Few-step generation: deterministic Euler steps on a uniform time grid,
//! each step conditioned on its own step size `1/n`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::flow::predict;
use crate::model::{CondBatch, VelocityModel};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::{ParamStore, Tensor};

/// One generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub n_steps: usize,
    /// Seed of the initial-noise stream.
    pub seed: u64,
    /// Single-row condition, if the model is conditional.
    pub cond: Option<CondBatch>,
}

impl SamplePlan {
    pub fn new(n_steps: usize, seed: u64, cond: Option<CondBatch>) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("n_steps must be ≥ 1"));
        }
        Ok(Self { n_steps, seed, cond })
    }

    pub fn noise(&self, dim: usize) -> Vec<f32> {
        let mut rng = stream(self.seed, Purpose::Sample, 0);
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Draws `[n, dim]` standard normal noise.
pub fn noise_batch(rng: &mut StreamRng, n: usize, dim: usize) -> Vec<f32> {
    (0..n * dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Integrates `x ← x + (1/n)·v(x, k/n, 1/n)` for `k = 0..n` from `x0`
/// (`[B, D]`).
pub fn integrate<M: VelocityModel>(
    model: &M,
    params: &ParamStore,
    x0: Tensor<f32>,
    n_steps: usize,
    cond: Option<&CondBatch>,
) -> Result<Tensor<f32>> {
    if n_steps == 0 {
        return Err(invalid("n_steps must be ≥ 1"));
    }
    let b = x0.shape()[0];
    let h = 1.0 / n_steps as f32;
    let dt = vec![h; b];
    let mut x = x0;
    for k in 0..n_steps {
        let t = vec![k as f32 / n_steps as f32; b];
        let v = predict(model, params, &x, &t, &dt, cond)?;
        if v.shape() != x.shape() {
            return Err(Error::ShapeMismatch { op: "euler step", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        x.data_mut().iter_mut().zip(v.data()).for_each(|(a, &b)| *a += h * b);
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampling step {k}")));
        }
    }
    Ok(x)
}

/// One action chunk `[H, A]`.
pub fn generate<M: VelocityModel>(model: &M, params: &ParamStore, plan: &SamplePlan) -> Result<Tensor<f32>> {
    let mut out = generate_batch(model, params, std::slice::from_ref(plan))?;
    Ok(out.pop().expect("one plan in, one chunk out"))
}

/// Vectorised [`generate`] over plans sharing `n_steps`.
pub fn generate_batch<M: VelocityModel>(
    model: &M,
    params: &ParamStore,
    plans: &[SamplePlan],
) -> Result<Vec<Tensor<f32>>> {
    let Some(first) = plans.first() else { return Ok(Vec::new()) };
    let n_steps = first.n_steps;
    if plans.iter().any(|p| p.n_steps != n_steps) {
        return Err(invalid("plans in one batch must share n_steps"));
    }
    let [h, a] = model.chunk_shape();
    let dim = h * a;
    let noise: Vec<f32> = plans.iter().flat_map(|p| p.noise(dim)).collect();
    let conds: Vec<&CondBatch> = plans.iter().filter_map(|p| p.cond.as_ref()).collect();
    let cond = match conds.len() {
        0 => None,
        n if n == plans.len() => Some(CondBatch::concat(&conds)?),
        _ => return Err(invalid("either every plan or no plan carries a condition")),
    };
    let x = integrate(model, params, Tensor::new([plans.len(), dim], noise)?, n_steps, cond.as_ref())?;
    (0..plans.len()).map(|i| Tensor::new([h, a], x.row(i).to_vec())).collect()
}
