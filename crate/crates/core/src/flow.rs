//! Straight-path flow construction, the flow-matching and consistency
//! objectives, the joint batch split, and the EMA anchor.
//!
//! Flow-matching rows regress `v(x_t, t, 0)` onto `x1 - x0`. Consistency rows
//! step to `t1 = min(t + Δt, 1)`, ask the EMA anchor for the velocity at
//! `x_{t1}` with an independent step `Δt'`, extrapolate to
//! `x̃1 = x_{t1} + (1 - t1)·v`, and regress `v(x_t, t, t1 - t)` onto the
//! average velocity `(x̃1 - x_t) / (1 - t)`. Targets are built on a separate
//! no-grad tape, so nothing flows into the anchor or through the target.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{draw_proprio_mask, CondBatch, VelocityModel, VelocityQuery};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::time_sampling::{ConsistencyTimeSpec, TimeSamplerSpec};

/// `(1 - t)·x0 + t·x1`.
pub fn interpolate(x0: &[f32], x1: &[f32], t: f32) -> Result<Vec<f32>> {
    if x0.len() != x1.len() {
        return Err(Error::ShapeMismatch { op: "interpolate", lhs: vec![x0.len()], rhs: vec![x1.len()] });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    Ok(x0.iter().zip(x1).map(|(&a, &b)| (1.0 - t) * a + t * b).collect())
}

/// Straight-path velocity `x1 - x0`.
pub fn fm_target(x0: &[f32], x1: &[f32]) -> Result<Vec<f32>> {
    if x0.len() != x1.len() {
        return Err(Error::ShapeMismatch { op: "fm_target", lhs: vec![x0.len()], rhs: vec![x1.len()] });
    }
    Ok(x0.iter().zip(x1).map(|(&a, &b)| b - a).collect())
}

/// A point on the straight path between a noise and a data sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPoint {
    pub x0: Vec<f32>,
    pub x1: Vec<f32>,
    pub t: f32,
    pub xt: Vec<f32>,
}

impl FlowPoint {
    pub fn new(x0: Vec<f32>, x1: Vec<f32>, t: f32) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        Ok(Self { x0, x1, t, xt })
    }

    pub fn target(&self) -> Vec<f32> {
        self.x0.iter().zip(&self.x1).map(|(&a, &b)| b - a).collect()
    }
}

/// A flow point paired with a clipped forward step and the anchor's query step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyInstance {
    pub base: FlowPoint,
    /// Step size as sampled.
    pub dt: f32,
    /// `min(t + Δt, 1)`.
    pub t1: f32,
    /// `t1 - t`: the step the trained model is conditioned on.
    pub dt_eff: f32,
    /// Step size passed to the anchor at `t1`.
    pub dt_anchor: f32,
    pub x_t1: Vec<f32>,
}

impl ConsistencyInstance {
    pub fn new(base: FlowPoint, dt: f32, dt_anchor: f32) -> Result<Self> {
        if !(dt >= 0.0 && dt_anchor >= 0.0) {
            return Err(invalid(format!("negative step sizes ({dt}, {dt_anchor})")));
        }
        let t1 = (base.t + dt).clamp(0.0, 1.0);
        let dt_eff = t1 - base.t;
        let x_t1 = interpolate(&base.x0, &base.x1, t1)?;
        Ok(Self { base, dt, t1, dt_eff, dt_anchor, x_t1 })
    }
}

/// How a batch is split between the two objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointBatchPlan {
    pub batch_size: usize,
    pub fm_fraction: f64,
}

impl JointBatchPlan {
    pub fn new(batch_size: usize, fm_fraction: f64) -> Result<Self> {
        let p = Self { batch_size, fm_fraction };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if !(0.0..=1.0).contains(&self.fm_fraction) {
            return Err(invalid(format!("fm_fraction must lie in [0, 1], got {}", self.fm_fraction)));
        }
        Ok(())
    }

    /// `round(fm_fraction · B)`.
    pub fn fm_count(&self) -> usize {
        ((self.fm_fraction * self.batch_size as f64).round() as usize).min(self.batch_size)
    }

    pub fn ct_count(&self) -> usize {
        self.batch_size - self.fm_count()
    }
}

/// Flow-matching rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FmBatch {
    pub points: Vec<FlowPoint>,
    pub cond: Option<CondBatch>,
    pub proprio_mask: Vec<bool>,
}

/// Consistency rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CtBatch {
    pub instances: Vec<ConsistencyInstance>,
    pub cond: Option<CondBatch>,
    pub proprio_mask: Vec<bool>,
}

/// One training batch: flow-matching rows first, then consistency rows.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    pub fm: FmBatch,
    pub ct: CtBatch,
}

impl JointBatch {
    pub fn len(&self) -> usize {
        self.fm.points.len() + self.ct.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws noise, times and step sizes for the data rows `x1` (`[B, D]`)
    /// according to `plan`. Rows `0..fm_count` become flow-matching rows.
    #[allow(clippy::too_many_arguments)]
    pub fn sample<R: Rng + ?Sized>(
        plan: &JointBatchPlan,
        fm_time: &TimeSamplerSpec,
        ct_time: &ConsistencyTimeSpec,
        x1: &Tensor<f32>,
        cond: Option<&CondBatch>,
        proprio_mask_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        plan.validate()?;
        let b = plan.batch_size;
        if x1.shape().len() != 2 || x1.shape()[0] != b {
            return Err(Error::ShapeMismatch { op: "joint batch data", lhs: x1.shape().to_vec(), rhs: vec![b] });
        }
        let nfm = plan.fm_count();
        let d = x1.shape()[1];
        let noise = |rng: &mut R| -> Vec<f32> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };

        let mut points = Vec::with_capacity(nfm);
        for i in 0..nfm {
            let x0 = noise(rng);
            let t = fm_time.sample_one(rng) as f32;
            points.push(FlowPoint::new(x0, x1.row(i).to_vec(), t)?);
        }
        let mut instances = Vec::with_capacity(b - nfm);
        for i in nfm..b {
            let x0 = noise(rng);
            let t = ct_time.sample_t_discrete(rng, 1)[0];
            let dt = ct_time.sample_dt_one(rng) as f32;
            let dt_anchor = ct_time.sample_dt_one(rng) as f32;
            let base = FlowPoint::new(x0, x1.row(i).to_vec(), t)?;
            instances.push(ConsistencyInstance::new(base, dt, dt_anchor)?);
        }
        let fm_mask = draw_proprio_mask(rng, nfm, proprio_mask_prob);
        let ct_mask = draw_proprio_mask(rng, b - nfm, proprio_mask_prob);
        let split = |range: std::ops::Range<usize>| -> Result<Option<CondBatch>> {
            match cond {
                Some(c) if !range.is_empty() => Ok(Some(c.gather(&range.collect::<Vec<_>>())?)),
                _ => Ok(None),
            }
        };
        Ok(Self {
            fm: FmBatch { points, cond: split(0..nfm)?, proprio_mask: fm_mask },
            ct: CtBatch { instances, cond: split(nfm..b)?, proprio_mask: ct_mask },
        })
    }
}

fn stack<T: Real>(rows: &[&[f32]]) -> Result<Tensor<T>> {
    let d = rows.first().map(|r| r.len()).ok_or(Error::EmptyBatch)?;
    if rows.iter().any(|r| r.len() != d) {
        return Err(invalid("ragged rows"));
    }
    Tensor::new([rows.len(), d], rows.iter().flat_map(|r| r.iter().map(|&x| T::of(x as f64))).collect())
}

/// `(1 - τ)·x0 + τ·x1` per instance, evaluated in `T`.
fn lerp_rows<T: Real>(batch: &CtBatch, tau: impl Fn(&ConsistencyInstance) -> f32) -> Result<Tensor<T>> {
    let d = batch.instances.first().map(|i| i.base.x0.len()).ok_or(Error::EmptyBatch)?;
    let mut out = Vec::with_capacity(batch.instances.len() * d);
    for inst in &batch.instances {
        let s = T::of(tau(inst) as f64);
        if inst.base.x0.len() != d {
            return Err(invalid("ragged rows"));
        }
        for (&a, &b) in inst.base.x0.iter().zip(&inst.base.x1) {
            out.push((T::one() - s) * T::of(a as f64) + s * T::of(b as f64));
        }
    }
    Tensor::new([batch.instances.len(), d], out)
}

fn check_cond_rows(cond: Option<&CondBatch>, n: usize) -> Result<()> {
    if let Some(b) = cond.and_then(|c| c.batch_size()) {
        if b != n {
            return Err(Error::ShapeMismatch { op: "condition rows", lhs: vec![b], rhs: vec![n] });
        }
    }
    Ok(())
}

/// Velocity prediction of `model` for rows `x` on a fresh no-grad tape.
pub fn predict<T: Real, M: VelocityModel>(
    model: &M,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    t: &[T],
    dt: &[T],
    cond: Option<&CondBatch>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::<T>::no_grad();
    let xv = tape.constant(x.clone());
    let v = model.velocity(&mut tape, params, &VelocityQuery { x_t: xv, t, dt, cond, proprio_mask: None })?;
    Ok(tape.value(v).clone())
}

/// Average-velocity targets from the EMA anchor, `[B, D]`, detached.
pub fn consistency_target<T: Real, M: VelocityModel>(
    model: &M,
    anchor: &ParamStore<T>,
    batch: &CtBatch,
    spec: &ConsistencyTimeSpec,
) -> Result<Tensor<T>> {
    let guard = spec.min_remaining() * (1.0 - 1e-4);
    for inst in &batch.instances {
        if ((1.0 - inst.base.t) as f64) < guard {
            return Err(invalid(format!(
                "1 - t = {} is below the grid guard {}",
                1.0 - inst.base.t,
                spec.min_remaining()
            )));
        }
    }
    let n = batch.instances.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_cond_rows(batch.cond.as_ref(), n)?;
    // Interpolants are rebuilt in `T` from the endpoints: the stored f32
    // copies would have their rounding amplified by 1/(1 - t).
    let x_t1 = lerp_rows::<T>(batch, |i| i.t1)?;
    let x_t = lerp_rows::<T>(batch, |i| i.base.t)?;
    let t1: Vec<T> = batch.instances.iter().map(|i| T::of(i.t1 as f64)).collect();
    let dta: Vec<T> = batch.instances.iter().map(|i| T::of(i.dt_anchor as f64)).collect();
    let v = predict(model, anchor, &x_t1, &t1, &dta, batch.cond.as_ref())?;
    let d = x_t1.shape()[1];
    let mut out = Vec::with_capacity(n * d);
    for (r, inst) in batch.instances.iter().enumerate() {
        let t = T::of(inst.base.t as f64);
        let t1 = T::of(inst.t1 as f64);
        for j in 0..d {
            let x1_hat = x_t1.data()[r * d + j] + (T::one() - t1) * v.data()[r * d + j];
            out.push((x1_hat - x_t.data()[r * d + j]) / (T::one() - t));
        }
    }
    Tensor::new([n, d], out)
}

/// Rows to regress: inputs, conditioning times and detached targets.
struct RegressionRows<T: Real> {
    x_t: Tensor<T>,
    t: Vec<T>,
    dt: Vec<T>,
    target: Tensor<T>,
}

fn fm_rows<T: Real>(batch: &FmBatch) -> Result<RegressionRows<T>> {
    let x_t = stack(&batch.points.iter().map(|p| p.xt.as_slice()).collect::<Vec<_>>())?;
    let targets: Vec<Vec<f32>> = batch.points.iter().map(FlowPoint::target).collect();
    let target = stack(&targets.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let t = batch.points.iter().map(|p| T::of(p.t as f64)).collect();
    let dt = vec![T::zero(); batch.points.len()];
    Ok(RegressionRows { x_t, t, dt, target })
}

fn ct_rows<T: Real, M: VelocityModel>(
    model: &M,
    anchor: &ParamStore<T>,
    batch: &CtBatch,
    spec: &ConsistencyTimeSpec,
) -> Result<RegressionRows<T>> {
    let target = consistency_target(model, anchor, batch, spec)?;
    let x_t = lerp_rows(batch, |i| i.base.t)?;
    let t = batch.instances.iter().map(|i| T::of(i.base.t as f64)).collect();
    let dt = batch.instances.iter().map(|i| T::of(i.dt_eff as f64)).collect();
    Ok(RegressionRows { x_t, t, dt, target })
}

/// Squared-error regression of the model onto `rows`; returns the tape node
/// of the mean loss and the per-sample losses.
fn regress<T: Real, M: VelocityModel>(
    model: &M,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    rows: &RegressionRows<T>,
    cond: Option<&CondBatch>,
    mask: &[bool],
) -> Result<(Var, Vec<f64>)> {
    let n = rows.t.len();
    check_cond_rows(cond, n)?;
    let x_t = tape.constant(rows.x_t.clone());
    let mask = (mask.len() == n).then_some(mask);
    let v = model.velocity(tape, params, &VelocityQuery { x_t, t: &rows.t, dt: &rows.dt, cond, proprio_mask: mask })?;
    let target = tape.constant(rows.target.clone());
    let diff = tape.sub(v, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let d = rows.target.shape()[1];
    let per_sample: Vec<f64> =
        tape.value(sq).data().chunks(d).map(|r| r.iter().map(|x| x.f64()).sum::<f64>() / d as f64).collect();
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((loss, per_sample))
}

/// Flow-matching loss: mean over rows of `‖v(x_t, t, 0) - (x1 - x0)‖²/D`.
pub fn fm_loss<T: Real, M: VelocityModel>(
    model: &M,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    batch: &FmBatch,
) -> Result<Var> {
    let rows = fm_rows(batch)?;
    Ok(regress(model, tape, params, &rows, batch.cond.as_ref(), &batch.proprio_mask)?.0)
}

/// Consistency loss against the EMA anchor's average-velocity targets.
pub fn ct_loss<T: Real, M: VelocityModel>(
    model: &M,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    anchor: &ParamStore<T>,
    batch: &CtBatch,
    spec: &ConsistencyTimeSpec,
) -> Result<Var> {
    let rows = ct_rows(model, anchor, batch, spec)?;
    Ok(regress(model, tape, params, &rows, batch.cond.as_ref(), &batch.proprio_mask)?.0)
}

/// Loss node plus the partition means for logging.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub loss: Var,
    pub value: f64,
    pub fm: Option<f64>,
    pub ct: Option<f64>,
}

/// `(Σ FM per-sample losses + Σ CT per-sample losses) / B`, evaluated as a
/// single forward pass over all rows.
pub fn joint_loss<T: Real, M: VelocityModel>(
    model: &M,
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    anchor: &ParamStore<T>,
    batch: &JointBatch,
    spec: &ConsistencyTimeSpec,
) -> Result<JointLoss> {
    let nfm = batch.fm.points.len();
    let nct = batch.ct.instances.len();
    if nfm + nct == 0 {
        return Err(Error::EmptyBatch);
    }
    let fm = (nfm > 0).then(|| fm_rows::<T>(&batch.fm)).transpose()?;
    let ct = (nct > 0).then(|| ct_rows(model, anchor, &batch.ct, spec)).transpose()?;
    let (rows, cond, mask) = match (fm, ct) {
        (Some(r), None) => (r, batch.fm.cond.clone(), batch.fm.proprio_mask.clone()),
        (None, Some(r)) => (r, batch.ct.cond.clone(), batch.ct.proprio_mask.clone()),
        (Some(a), Some(b)) => {
            let d = a.target.shape()[1];
            let cat = |x: &Tensor<T>, y: &Tensor<T>| {
                Tensor::new([nfm + nct, d], x.data().iter().chain(y.data()).copied().collect())
            };
            let rows = RegressionRows {
                x_t: cat(&a.x_t, &b.x_t)?,
                t: a.t.into_iter().chain(b.t).collect(),
                dt: a.dt.into_iter().chain(b.dt).collect(),
                target: cat(&a.target, &b.target)?,
            };
            let cond = match (&batch.fm.cond, &batch.ct.cond) {
                (Some(x), Some(y)) => Some(CondBatch::concat(&[x, y])?),
                (None, None) => None,
                _ => return Err(invalid("condition present on only one partition")),
            };
            let mask = batch.fm.proprio_mask.iter().chain(&batch.ct.proprio_mask).copied().collect();
            (rows, cond, mask)
        }
        (None, None) => unreachable!(),
    };
    let (loss, per_sample) = regress(model, tape, params, &rows, cond.as_ref(), &mask)?;
    let mean = |s: &[f64]| (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64);
    Ok(JointLoss {
        loss,
        value: tape.value(loss).data()[0].f64(),
        fm: mean(&per_sample[..nfm]),
        ct: mean(&per_sample[nfm..]),
    })
}

/// Exponential moving average of the live parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    params: ParamStore,
    decay: f64,
}

impl EmaShadow {
    /// Starts as a copy of `live`.
    pub fn new(live: &ParamStore, decay: f64) -> Result<Self> {
        Self::from_params(live.detached(), decay)
    }

    pub fn from_params(params: ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { params: params.detached(), decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `θ⁻ ← μ·θ⁻ + (1 - μ)·θ`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        self.params.check_mirrors(live)?;
        let mu = self.decay as f32;
        let one_minus = 1.0 - mu;
        for ((_, shadow), (_, p)) in self.params.iter_mut().zip(live.iter()) {
            for (s, &x) in shadow.value.data_mut().iter_mut().zip(p.value.data()) {
                *s = mu * *s + one_minus * x;
            }
        }
        Ok(())
    }
}
