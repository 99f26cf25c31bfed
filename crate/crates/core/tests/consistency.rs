use maniflow_core::flow::{
    consistency_target, ct_loss, fm_loss, joint_loss, ConsistencyInstance, CtBatch, EmaShadow, FlowPoint, FmBatch,
    JointBatch, JointBatchPlan,
};
use maniflow_core::model::{VelocityModel, VelocityQuery};
use maniflow_core::rng::{stream, Purpose, StreamRng};
use maniflow_core::tensor::{ParamStore, Real, Tape, Tensor, Var};
use maniflow_core::time_sampling::{ConsistencyTimeSpec, StepSizeMode, TimeSamplerSpec};
use maniflow_core::Result;
use rand::Rng;
use rand_distr::StandardNormal;

/// Returns the same value everywhere.
struct Constant(f64);

impl VelocityModel for Constant {
    fn chunk_shape(&self) -> [usize; 2] {
        [1, 1]
    }

    fn velocity<T: Real>(&self, tape: &mut Tape<T>, _: &ParamStore<T>, q: &VelocityQuery<'_, T>) -> Result<Var> {
        let shape = tape.shape(q.x_t).to_vec();
        Ok(tape.constant(Tensor::full(shape, T::of(self.0))))
    }
}

/// Returns a fixed velocity per row: the straight-path velocity of each pair.
struct Rows(Vec<Vec<f32>>);

impl VelocityModel for Rows {
    fn chunk_shape(&self) -> [usize; 2] {
        [1, self.0[0].len()]
    }

    fn velocity<T: Real>(&self, tape: &mut Tape<T>, _: &ParamStore<T>, q: &VelocityQuery<'_, T>) -> Result<Var> {
        let shape = tape.shape(q.x_t).to_vec();
        assert_eq!(shape[0], self.0.len());
        let data = self.0.iter().flatten().map(|&v| T::of(v as f64)).collect();
        Ok(tape.constant(Tensor::new(shape, data)?))
    }
}

/// `v = tanh(x W + t a + Δt b)`, small enough to re-implement by hand.
struct Tiny {
    dim: usize,
}

impl Tiny {
    fn params(dim: usize, rng: &mut StreamRng) -> ParamStore<f64> {
        let mut p = ParamStore::<f64>::new();
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        p.insert("w", Tensor::new([dim, dim], r(dim * dim)).unwrap()).unwrap();
        p.insert("a", Tensor::new([1, dim], r(dim)).unwrap()).unwrap();
        p.insert("b", Tensor::new([1, dim], r(dim)).unwrap()).unwrap();
        p
    }

    /// The same map without a tape.
    fn eval(p: &ParamStore<f64>, x: &[f64], t: f64, dt: f64) -> Vec<f64> {
        let d = x.len();
        let w = p.value("w").unwrap().data();
        let a = p.value("a").unwrap().data();
        let b = p.value("b").unwrap().data();
        (0..d)
            .map(|j| {
                let s: f64 = (0..d).map(|i| x[i] * w[i * d + j]).sum();
                (s + t * a[j] + dt * b[j]).tanh()
            })
            .collect()
    }
}

impl VelocityModel for Tiny {
    fn chunk_shape(&self) -> [usize; 2] {
        [1, self.dim]
    }

    fn velocity<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, q: &VelocityQuery<'_, T>) -> Result<Var> {
        let n = q.t.len();
        let w = tape.param(p, "w")?;
        let a = tape.param(p, "a")?;
        let b = tape.param(p, "b")?;
        let t = tape.constant(Tensor::new([n, 1], q.t.to_vec())?);
        let dt = tape.constant(Tensor::new([n, 1], q.dt.to_vec())?);
        let xw = tape.matmul(q.x_t, w)?;
        let ta = tape.matmul(t, a)?;
        let db = tape.matmul(dt, b)?;
        let s = tape.add(xw, ta)?;
        let s = tape.add(s, db)?;
        Ok(tape.tanh(s))
    }
}

fn randn(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn ct_batch(instances: Vec<ConsistencyInstance>) -> CtBatch {
    let n = instances.len();
    CtBatch { instances, cond: None, proprio_mask: vec![false; n] }
}

#[test]
fn straight_path_anchor_gives_the_straight_velocity() {
    let spec = ConsistencyTimeSpec::default();
    let mut rng = stream(0, Purpose::Verify, 0);
    let mut worst = 0.0f64;
    let mut total = 0;
    for _ in 0..10 {
        let mut instances = Vec::new();
        let mut vel = Vec::new();
        for _ in 0..1000 {
            let x0 = randn(&mut rng, 3);
            let x1 = randn(&mut rng, 3);
            let t = spec.sample_t_discrete(&mut rng, 1)[0];
            let base = FlowPoint::new(x0, x1, t).unwrap();
            vel.push(base.target());
            let dt = rng.random::<f32>();
            let dta = rng.random::<f32>();
            instances.push(ConsistencyInstance::new(base, dt, dta).unwrap());
        }
        let batch = ct_batch(instances);
        let target = consistency_target(&Rows(vel.clone()), &ParamStore::<f64>::new(), &batch, &spec).unwrap();
        for (r, v) in vel.iter().enumerate() {
            for (a, b) in target.row(r).iter().zip(v) {
                worst = worst.max((a - *b as f64).abs());
            }
            total += 1;
        }
    }
    assert_eq!(total, 10_000);
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn constant_anchor_hand_example() {
    let base = FlowPoint::new(vec![0.0], vec![1.0], 0.25).unwrap();
    let inst = ConsistencyInstance::new(base, 0.25, 0.5).unwrap();
    assert_eq!(inst.x_t1, vec![0.5]);
    let spec = ConsistencyTimeSpec::default();
    let target = consistency_target(&Constant(0.8), &ParamStore::<f64>::new(), &ct_batch(vec![inst]), &spec).unwrap();
    // x̃1 = 0.5 + 0.5·0.8 = 0.9, target = (0.9 - 0.25)/0.75.
    assert!((target.data()[0] - 0.65 / 0.75).abs() < 1e-7);
    assert!((target.data()[0] - 0.8667).abs() < 1e-4);
}

#[test]
fn clipped_step_annihilates_the_anchor() {
    let base = FlowPoint::new(vec![0.0, 2.0], vec![1.0, -1.0], 0.9).unwrap();
    let inst = ConsistencyInstance::new(base, 0.25, 0.7).unwrap();
    assert_eq!(inst.t1, 1.0);
    let spec = ConsistencyTimeSpec::default();
    let target = consistency_target(&Constant(123.0), &ParamStore::<f64>::new(), &ct_batch(vec![inst]), &spec).unwrap();
    assert!((target.data()[0] - 1.0).abs() < 1e-5);
    assert!((target.data()[1] + 3.0).abs() < 1e-5);
}

#[test]
fn zero_step_reduces_to_self_distillation() {
    let mut rng = stream(1, Purpose::Verify, 0);
    let anchor = Tiny::params(2, &mut rng);
    let base = FlowPoint::new(vec![0.3, -0.7], vec![1.2, 0.4], 0.3).unwrap();
    let inst = ConsistencyInstance::new(base.clone(), 0.0, 0.6).unwrap();
    assert_eq!(inst.t1, inst.base.t);
    let spec = ConsistencyTimeSpec::default();
    let target = consistency_target(&Tiny { dim: 2 }, &anchor, &ct_batch(vec![inst]), &spec).unwrap();
    let xt: Vec<f64> = base.xt.iter().map(|&v| v as f64).collect();
    let v = Tiny::eval(&anchor, &xt, 0.3f32 as f64, 0.6f32 as f64);
    for (a, b) in target.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn grid_guard_rejects_times_too_close_to_one() {
    let spec = ConsistencyTimeSpec::new(4, StepSizeMode::Continuous).unwrap();
    let base = FlowPoint::new(vec![0.0], vec![1.0], 0.9).unwrap();
    let inst = ConsistencyInstance::new(base, 0.05, 0.1).unwrap();
    assert!(consistency_target(&Constant(0.0), &ParamStore::<f64>::new(), &ct_batch(vec![inst]), &spec).is_err());
}

#[test]
fn flow_matching_loss_of_stub_models() {
    let p = FlowPoint::new(vec![0.0], vec![1.0], 0.4).unwrap();
    let batch = FmBatch { points: vec![p], cond: None, proprio_mask: vec![false] };
    let mut tape = Tape::<f64>::new();
    let l = fm_loss(&Constant(0.0), &mut tape, &ParamStore::new(), &batch).unwrap();
    assert_eq!(tape.value(l).item(), Some(1.0));

    let mut rng = stream(2, Purpose::Verify, 0);
    let points: Vec<FlowPoint> =
        (0..5).map(|_| FlowPoint::new(randn(&mut rng, 2), randn(&mut rng, 2), rng.random()).unwrap()).collect();
    let oracle = Rows(points.iter().map(FlowPoint::target).collect());
    let batch = FmBatch { points, cond: None, proprio_mask: vec![false; 5] };
    let mut tape = Tape::<f64>::new();
    let l = fm_loss(&oracle, &mut tape, &ParamStore::new(), &batch).unwrap();
    assert!(tape.value(l).item().unwrap().abs() < 1e-12);
}

#[test]
fn straight_model_and_anchor_give_zero_joint_loss() {
    let mut rng = stream(3, Purpose::Verify, 0);
    let plan = JointBatchPlan::new(8, 0.75).unwrap();
    let spec = ConsistencyTimeSpec::default();
    let x1 = Tensor::new([8, 2], randn(&mut rng, 16)).unwrap();
    let batch = JointBatch::sample(&plan, &TimeSamplerSpec::DEFAULT_BETA, &spec, &x1, None, 0.0, &mut rng).unwrap();
    assert_eq!((batch.fm.points.len(), batch.ct.instances.len()), (6, 2));
    let fm_rows: Vec<Vec<f32>> = batch.fm.points.iter().map(FlowPoint::target).collect();
    let ct_rows: Vec<Vec<f32>> = batch.ct.instances.iter().map(|i| i.base.target()).collect();
    // The model sees FM rows then CT rows in one pass; the anchor sees CT rows only.
    let model = Rows(fm_rows.iter().chain(&ct_rows).cloned().collect());
    let anchor = Rows(ct_rows);
    let empty = ParamStore::<f64>::new();
    let target = consistency_target(&anchor, &empty, &batch.ct, &spec).unwrap();
    let mut tape = Tape::<f64>::new();
    let v = {
        let x = tape.constant(Tensor::zeros([8, 2]));
        let t = vec![0.0; 8];
        model
            .velocity(&mut tape, &empty, &VelocityQuery { x_t: x, t: &t, dt: &t, cond: None, proprio_mask: None })
            .unwrap()
    };
    let v_ct = &tape.value(v).data()[12..];
    for (a, b) in v_ct.iter().zip(target.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// Independent evaluation of the joint objective from the batch contents.
fn oracle_joint_loss(live: &ParamStore<f64>, anchor: &ParamStore<f64>, batch: &JointBatch) -> (f64, f64, f64) {
    let f = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let sq =
        |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64 };
    let mut fm = Vec::new();
    for p in &batch.fm.points {
        let v = Tiny::eval(live, &f(&p.xt), p.t as f64, 0.0);
        let target: Vec<f64> = p.x0.iter().zip(&p.x1).map(|(&a, &b)| b as f64 - a as f64).collect();
        fm.push(sq(&v, &target));
    }
    let mut ct = Vec::new();
    for inst in &batch.ct.instances {
        let t = inst.base.t as f64;
        let t1 = (t + inst.dt as f64).min(1.0);
        let x0 = f(&inst.base.x0);
        let x1 = f(&inst.base.x1);
        let xt: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let xt1: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t1) * a + t1 * b).collect();
        let va = Tiny::eval(anchor, &xt1, t1, inst.dt_anchor as f64);
        let target: Vec<f64> = (0..xt.len()).map(|j| (xt1[j] + (1.0 - t1) * va[j] - xt[j]) / (1.0 - t)).collect();
        let v = Tiny::eval(live, &xt, t, t1 - t);
        ct.push(sq(&v, &target));
    }
    let n = (fm.len() + ct.len()) as f64;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    ((fm.iter().sum::<f64>() + ct.iter().sum::<f64>()) / n, mean(&fm), mean(&ct))
}

#[test]
fn joint_loss_matches_a_direct_reimplementation() {
    for seed in 0..5 {
        let mut rng = stream(seed, Purpose::Verify, 1);
        let dim = 3;
        let live = Tiny::params(dim, &mut rng);
        let anchor = Tiny::params(dim, &mut rng);
        let plan = JointBatchPlan::new(16, 0.75).unwrap();
        let mode = if seed % 2 == 0 { StepSizeMode::Continuous } else { StepSizeMode::Discrete };
        let spec = ConsistencyTimeSpec::new(100, mode).unwrap();
        let x1 = Tensor::new([16, dim], randn(&mut rng, 16 * dim)).unwrap();
        let batch = JointBatch::sample(&plan, &TimeSamplerSpec::DEFAULT_MODE, &spec, &x1, None, 0.0, &mut rng).unwrap();
        let model = Tiny { dim };
        let mut tape = Tape::<f64>::new();
        let jl = joint_loss(&model, &mut tape, &live, &anchor, &batch, &spec).unwrap();
        let (total, fm, ct) = oracle_joint_loss(&live, &anchor, &batch);
        // f32-stored times and points leave the rounding of t1 - t as the only difference.
        assert!((jl.value - total).abs() < 1e-6, "{} vs {total}", jl.value);
        assert!((jl.fm.unwrap() - fm).abs() < 1e-6);
        assert!((jl.ct.unwrap() - ct).abs() < 1e-6);

        let mut tape = Tape::<f64>::new();
        let l = ct_loss(&model, &mut tape, &live, &anchor, &batch.ct, &spec).unwrap();
        assert!((tape.value(l).item().unwrap() - ct).abs() < 1e-6);
        let mut tape = Tape::<f64>::new();
        let l = fm_loss(&model, &mut tape, &live, &batch.fm).unwrap();
        assert!((tape.value(l).item().unwrap() - fm).abs() < 1e-6);
    }
}

#[test]
fn gradients_reach_only_the_live_parameters() {
    let mut rng = stream(9, Purpose::Verify, 0);
    let dim = 2;
    let live = Tiny::params(dim, &mut rng);
    // The anchor starts as an exact copy, so only detachment keeps the
    // target out of the gradient.
    let anchor = live.detached();
    let plan = JointBatchPlan::new(12, 0.5).unwrap();
    let spec = ConsistencyTimeSpec::default();
    let x1 = Tensor::new([12, dim], randn(&mut rng, 12 * dim)).unwrap();
    let batch = JointBatch::sample(&plan, &TimeSamplerSpec::Uniform, &spec, &x1, None, 0.0, &mut rng).unwrap();
    let model = Tiny { dim };
    let mut tape = Tape::<f64>::new();
    let jl = joint_loss(&model, &mut tape, &live, &anchor, &batch, &spec).unwrap();
    let mut grads = live.detached();
    tape.backward_into(jl.loss, &mut grads).unwrap();
    let before = anchor.clone();

    let h = 1e-6;
    for name in ["w", "a", "b"] {
        let analytic = grads.grad(name).unwrap().data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = live.clone();
            p.value_mut(name).unwrap().data_mut()[i] += h;
            let mut m = live.clone();
            m.value_mut(name).unwrap().data_mut()[i] -= h;
            let numeric =
                (oracle_joint_loss(&p, &anchor, &batch).0 - oracle_joint_loss(&m, &anchor, &batch).0) / (2.0 * h);
            assert!((numeric - a).abs() <= 1e-6 * (1.0 + numeric.abs()), "{name}[{i}]: {numeric} vs {a}");
        }
    }
    assert_eq!(anchor, before);
    assert!(anchor.iter().all(|(_, p)| p.grad.is_none()));
}

#[test]
fn pure_flow_matching_plan_has_no_consistency_rows() {
    let mut rng = stream(4, Purpose::Verify, 0);
    let plan = JointBatchPlan::new(10, 1.0).unwrap();
    let x1 = Tensor::new([10, 2], randn(&mut rng, 20)).unwrap();
    let batch = JointBatch::sample(
        &plan,
        &TimeSamplerSpec::DEFAULT_BETA,
        &ConsistencyTimeSpec::default(),
        &x1,
        None,
        0.0,
        &mut rng,
    )
    .unwrap();
    assert_eq!(batch.fm.points.len(), 10);
    assert!(batch.ct.instances.is_empty());
    let mut tape = Tape::<f64>::new();
    let jl = joint_loss(
        &Constant(0.0),
        &mut tape,
        &ParamStore::new(),
        &ParamStore::new(),
        &batch,
        &ConsistencyTimeSpec::default(),
    )
    .unwrap();
    assert!(jl.ct.is_none());
}

#[test]
fn ema_gap_shrinks_geometrically() {
    let mut live = ParamStore::new();
    live.insert("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let mut ema = EmaShadow::new(&live, 0.9).unwrap();
    let target = Tensor::new([3], vec![0.0, 1.0, 2.0]).unwrap();
    *live.value_mut("w").unwrap() = target.clone();
    let start = [1.0f64, -2.0, 0.5];
    for k in 1..=50 {
        ema.update(&live).unwrap();
        let got = ema.params().value("w").unwrap().data();
        for j in 0..3 {
            let expect = target.data()[j] as f64 + 0.9f64.powi(k) * (start[j] - target.data()[j] as f64);
            assert!((got[j] as f64 - expect).abs() < 1e-5, "step {k}: {} vs {expect}", got[j]);
        }
    }
}
