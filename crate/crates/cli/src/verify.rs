//! Quick invariant suite behind the `verify` subcommand. Each check is a
//! reduced version of a property the test suite covers at full size.

use anyhow::{ensure, Context, Result};
use maniflow_core::flow::{consistency_target, ConsistencyInstance, CtBatch, FlowPoint};
use maniflow_core::inference::noise_batch;
use maniflow_core::model::{CondBatch, ModelConfig, VelocityModel, VelocityNet, VelocityQuery};
use maniflow_core::rng::{stream, Purpose, StreamRng};
use maniflow_core::tensor::{ParamStore, Real, Tape, Tensor, Var};
use maniflow_core::time_sampling::{cosmap_transform, mode_transform, ConsistencyTimeSpec, TimeSamplerSpec};
use maniflow_core::train::TrainState;
use rand::Rng;
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF, Normal};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::plot::{histogram, BINS};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e:#}") },
    }
}

/// Runs every check; `seed` varies the random inputs.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check("gradients", gradients(seed)),
        check("zero_init_identity", zero_init_identity(seed)),
        check("straight_path_consistency", straight_path(seed)),
        check("timestep_samplers", samplers(seed)),
        check("checkpoint_round_trip", checkpoint_round_trip(seed)),
    ]
}

fn f64s(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    noise_batch(rng, n, 1).into_iter().map(f64::from).collect()
}

fn small_ditx() -> ModelConfig {
    ModelConfig { token_dim: 8, depth: 1, heads: 2, action_horizon: 2, ff_mult: 2, ..ModelConfig::default() }
}

struct Probe {
    x: Tensor<f64>,
    t: Vec<f64>,
    dt: Vec<f64>,
    cond: Option<CondBatch>,
    mask: Vec<bool>,
    w: Tensor<f64>,
}

fn probe(cfg: &ModelConfig, b: usize, rng: &mut StreamRng) -> Result<Probe> {
    let d = cfg.sample_dim();
    let field = |rng: &mut StreamRng, w: usize| -> Result<Option<Tensor<f32>>> {
        Ok(if w > 0 { Some(Tensor::new([b, w], noise_batch(rng, b, w))?) } else { None })
    };
    let cond = if cfg.is_conditional() {
        Some(CondBatch {
            obs: field(rng, cfg.obs_width())?,
            goal: field(rng, cfg.goal_dim)?,
            proprio: field(rng, cfg.proprio_dim)?,
        })
    } else {
        None
    };
    Ok(Probe {
        x: Tensor::new([b, d], f64s(rng, b * d))?,
        t: (0..b).map(|_| rng.random()).collect(),
        dt: (0..b).map(|_| rng.random()).collect(),
        cond,
        mask: (0..b).map(|i| i % 2 == 1).collect(),
        w: Tensor::new([b, d], f64s(rng, b * d))?,
    })
}

/// `Σ w ⊙ v(x)` and, with `grad`, its gradient w.r.t. every parameter.
fn probe_loss(
    net: &VelocityNet,
    params: &ParamStore<f64>,
    p: &Probe,
    grad: bool,
) -> Result<(f64, Option<ParamStore<f64>>)> {
    let mut tape = if grad { Tape::<f64>::new() } else { Tape::<f64>::no_grad() };
    let x = tape.constant(p.x.clone());
    let q = VelocityQuery { x_t: x, t: &p.t, dt: &p.dt, cond: p.cond.as_ref(), proprio_mask: Some(&p.mask) };
    let v = net.velocity(&mut tape, params, &q)?;
    let w = tape.constant(p.w.clone());
    let prod = tape.mul(v, w)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss).item().context("loss is not a scalar")?;
    if !grad {
        return Ok((value, None));
    }
    let mut store = params.detached();
    tape.backward_into(loss, &mut store)?;
    Ok((value, Some(store)))
}

/// Central differences against reverse mode on randomly perturbed networks.
fn gradients(seed: u64) -> Result<(bool, String)> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut worst = 0.0f64;
    let cfgs = [ModelConfig::plain_mlp(2, 8), ModelConfig::plain_mlp(3, 8), small_ditx()];
    for (k, cfg) in cfgs.iter().enumerate() {
        let k = k as u64;
        let (net, p32) = VelocityNet::init(*cfg, &mut stream(seed, Purpose::Init, k))?;
        let mut params = p32.cast::<f64>();
        let mut rng = stream(seed, Purpose::Verify, 100 + k);
        for (_, p) in params.iter_mut() {
            for x in p.value.data_mut() {
                *x += 0.3 * f64s(&mut rng, 1)[0];
            }
        }
        let pr = probe(cfg, 3, &mut rng)?;
        let grads = probe_loss(&net, &params, &pr, true)?.1.expect("gradient requested");
        for name in params.names().cloned().collect::<Vec<_>>() {
            let analytic = grads.grad(&name).map(|g| g.data().to_vec()).unwrap_or_default();
            ensure!(!analytic.is_empty(), "{name} received no gradient");
            let n = params.value(&name)?.numel();
            let mut num = Vec::with_capacity(n);
            for i in 0..n {
                let mut plus = params.clone();
                plus.value_mut(&name)?.data_mut()[i] += H;
                let mut minus = params.clone();
                minus.value_mut(&name)?.data_mut()[i] -= H;
                num.push(
                    (probe_loss(&net, &plus, &pr, false)?.0 - probe_loss(&net, &minus, &pr, false)?.0) / (2.0 * H),
                );
            }
            let diff = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().chain(&num).map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max(diff / scale.max(1e-5));
        }
    }
    Ok((worst < TOL, format!("{} networks, worst relative error {worst:.2e} (tolerance {TOL:e})", cfgs.len())))
}

/// A fresh DiT-X stack leaves action tokens untouched.
fn zero_init_identity(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig { token_dim: 16, depth: 3, heads: 2, ..ModelConfig::default() };
    let (net, params) = VelocityNet::init(cfg, &mut stream(seed, Purpose::Init, 9))?;
    let mut rng = stream(seed, Purpose::Verify, 200);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let b = 2;
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::new([b, cfg.sample_dim()], noise_batch(&mut rng, b, cfg.sample_dim()))?);
        let t: Vec<f32> = (0..b).map(|_| rng.random()).collect();
        let dt: Vec<f32> = (0..b).map(|_| rng.random()).collect();
        let c = CondBatch {
            obs: Some(Tensor::new([b, cfg.obs_width()], noise_batch(&mut rng, b, cfg.obs_width()))?),
            goal: Some(Tensor::new([b, cfg.goal_dim], noise_batch(&mut rng, b, cfg.goal_dim))?),
            proprio: Some(Tensor::new([b, cfg.proprio_dim], noise_batch(&mut rng, b, cfg.proprio_dim))?),
        };
        let tokens = net.encode_condition(&mut tape, &params, &c, None)?;
        let a0 = net.action_tokens(&mut tape, &params, x)?;
        let e = net.embed_time(&mut tape, &params, &t, &dt)?;
        let mut h = a0;
        for i in 0..cfg.depth {
            let m = net.modulation(&mut tape, &params, i, e)?;
            h = net.ditx_block(&mut tape, &params, i, h, tokens.tokens, &m)?;
        }
        let diff = tape.value(a0).data().iter().zip(tape.value(h).data()).map(|(p, q)| (p - q).abs());
        worst = diff.fold(worst, f32::max);
    }
    Ok((worst == 0.0, format!("20 batches, largest change {worst:e}")))
}

/// Velocity model that returns one fixed row per batch entry.
struct Rows(Vec<Vec<f32>>);

impl VelocityModel for Rows {
    fn chunk_shape(&self) -> [usize; 2] {
        [1, self.0[0].len()]
    }

    fn velocity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        _: &ParamStore<T>,
        q: &VelocityQuery<'_, T>,
    ) -> maniflow_core::Result<Var> {
        let shape = tape.shape(q.x_t).to_vec();
        let data = self.0.iter().flatten().map(|&v| T::of(v as f64)).collect();
        Ok(tape.constant(Tensor::new(shape, data)?))
    }
}

/// With the straight-path velocity as anchor, the consistency target equals
/// that velocity.
fn straight_path(seed: u64) -> Result<(bool, String)> {
    const TOL: f64 = 1e-6;
    let spec = ConsistencyTimeSpec::default();
    let mut rng = stream(seed, Purpose::Verify, 300);
    let n = 1000;
    let mut instances = Vec::with_capacity(n);
    let mut vel = Vec::with_capacity(n);
    for _ in 0..n {
        let base = FlowPoint::new(
            noise_batch(&mut rng, 1, 3),
            noise_batch(&mut rng, 1, 3),
            spec.sample_t_discrete(&mut rng, 1)[0],
        )?;
        vel.push(base.target());
        let (dt, dta) = (rng.random::<f32>(), rng.random::<f32>());
        instances.push(ConsistencyInstance::new(base, dt, dta)?);
    }
    let batch = CtBatch { instances, cond: None, proprio_mask: vec![false; n] };
    let target = consistency_target(&Rows(vel.clone()), &ParamStore::<f64>::new(), &batch, &spec)?;
    let mut worst = 0.0f64;
    for (r, v) in vel.iter().enumerate() {
        for (a, b) in target.row(r).iter().zip(v) {
            worst = worst.max((a - *b as f64).abs());
        }
    }
    Ok((worst <= TOL, format!("{n} instances, worst deviation {worst:.2e} (tolerance {TOL:e})")))
}

fn invert(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let increasing = f(1.0) > f(0.0);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `P(t ≤ x)` for each default sampler.
fn cdf(spec: &TimeSamplerSpec, x: f64) -> f64 {
    match *spec {
        TimeSamplerSpec::Uniform => x,
        TimeSamplerSpec::Beta { alpha, beta, cutoff } => Beta::new(alpha, beta).unwrap().cdf((x / cutoff).min(1.0)),
        TimeSamplerSpec::LogitNormal { location, scale } => {
            if x <= 0.0 {
                0.0
            } else if x >= 1.0 {
                1.0
            } else {
                Normal::new(location, scale).unwrap().cdf((x / (1.0 - x)).ln())
            }
        }
        // The mode transform decreases in u, the cosmap transform increases.
        TimeSamplerSpec::Mode { scale } => 1.0 - invert(|u| mode_transform(u, scale), x),
        TimeSamplerSpec::Cosmap => invert(cosmap_transform, x),
    }
}

/// Chi-square goodness of fit of every default sampler.
fn samplers(seed: u64) -> Result<(bool, String)> {
    const DRAWS: usize = 200_000;
    let crit = ChiSquared::new((BINS - 1) as f64)?.inverse_cdf(0.999);
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, s) in TimeSamplerSpec::ALL_DEFAULTS.iter().enumerate() {
        let counts = histogram(&s.sample(&mut stream(seed, Purpose::Verify, 400 + i as u64), DRAWS));
        let mut stat = 0.0;
        for (b, &o) in counts.iter().enumerate() {
            let lo = if b == 0 { 0.0 } else { cdf(s, b as f64 / BINS as f64) };
            let hi = if b + 1 == BINS { 1.0 } else { cdf(s, (b + 1) as f64 / BINS as f64) };
            let e = (hi - lo).abs() * DRAWS as f64;
            stat += (o as f64 - e).powi(2) / e.max(1e-9);
        }
        ok &= stat < crit;
        parts.push(format!("{} {stat:.1}", s.name()));
    }
    Ok((ok, format!("chi-square over {BINS} bins (critical {crit:.1}): {}", parts.join(", "))))
}

/// Saving and reloading a freshly initialised state is bit-exact.
fn checkpoint_round_trip(seed: u64) -> Result<(bool, String)> {
    let cfg = ExperimentConfig::from_toml(
        "[task]\nkind = \"gaussian_ring\"\nmodes = 8\nradius = 1.0\nsigma = 0.05\n[model]\ntoken_dim = 16\n",
    )?;
    let state = TrainState::new(cfg.model_config(), &cfg.train, seed)?;
    let c = checkpoint::to_container(&cfg, &state)?;
    let dir = std::env::temp_dir().join(format!("maniflow-verify-{}-{seed}", std::process::id()));
    c.write(&dir)?;
    let loaded = checkpoint::load(&dir);
    std::fs::remove_dir_all(&dir)?;
    let (cfg2, state2) = loaded?;
    let same = cfg2 == cfg && checkpoint::to_container(&cfg2, &state2)? == c;
    Ok((same, format!("{} arrays", c.arrays().len())))
}
