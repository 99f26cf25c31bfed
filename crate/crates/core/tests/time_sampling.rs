use maniflow_core::model::draw_proprio_mask;
use maniflow_core::rng::{stream, Purpose};
use maniflow_core::time_sampling::{
    cosmap_transform, mode_transform, ConsistencyTimeSpec, StepSizeMode, TimeSamplerSpec,
};
use proptest::prelude::*;
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF, Normal};

const BINS: usize = 50;
const DRAWS: usize = 1_000_000;

fn chi_square(counts: &[u64], probs: &[f64], n: usize) -> f64 {
    counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

fn critical(df: usize, alpha: f64) -> f64 {
    ChiSquared::new(df as f64).unwrap().inverse_cdf(1.0 - alpha)
}

fn histogram(ts: &[f32]) -> Vec<u64> {
    let mut c = vec![0u64; BINS];
    for &t in ts {
        c[((t as f64 * BINS as f64) as usize).min(BINS - 1)] += 1;
    }
    c
}

/// Root of a monotone function on [0, 1] by bisection.
fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let increasing = f(1.0) > f(0.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Reference CDF of each sampler, built without the sampling code paths.
fn reference_cdf(spec: &TimeSamplerSpec) -> Box<dyn Fn(f64) -> f64> {
    match *spec {
        TimeSamplerSpec::Uniform => Box::new(|x| x.clamp(0.0, 1.0)),
        TimeSamplerSpec::Beta { alpha, beta, cutoff } => {
            let d = Beta::new(alpha, beta).unwrap();
            Box::new(move |x| d.cdf((x / cutoff).min(1.0)))
        }
        TimeSamplerSpec::LogitNormal { location, scale } => {
            let d = Normal::new(location, scale).unwrap();
            Box::new(move |x| {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    d.cdf((x / (1.0 - x)).ln())
                }
            })
        }
        // Decreasing in u, so P(t ≤ x) = 1 − u*(x).
        TimeSamplerSpec::Mode { scale } => Box::new(move |x| {
            let s = scale;
            let f = move |u: f64| 1.0 - u - s * ((std::f64::consts::FRAC_PI_2 * u).cos().powi(2) - 1.0 + u);
            1.0 - bisect(f, x)
        }),
        TimeSamplerSpec::Cosmap => Box::new(|x| {
            let f = |u: f64| 1.0 - 1.0 / ((std::f64::consts::FRAC_PI_2 * u).tan() + 1.0);
            if x >= 1.0 {
                1.0
            } else {
                bisect(f, x)
            }
        }),
    }
}

fn bin_probs(cdf: &dyn Fn(f64) -> f64) -> Vec<f64> {
    (0..BINS).map(|i| cdf((i + 1) as f64 / BINS as f64) - cdf(i as f64 / BINS as f64)).collect()
}

#[test]
fn all_samplers_pass_chi_square() {
    let crit = critical(BINS - 1, 0.001);
    for (i, spec) in TimeSamplerSpec::ALL_DEFAULTS.iter().enumerate() {
        let ts = spec.sample(&mut stream(11, Purpose::Verify, i as u64), DRAWS);
        let probs = bin_probs(&*reference_cdf(spec));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{spec:?}");
        let stat = chi_square(&histogram(&ts), &probs, DRAWS);
        assert!(stat < crit, "{}: chi2 {stat:.1} ≥ {crit:.1}", spec.name());
    }
}

#[test]
fn chi_square_rejects_a_mismatched_density() {
    let ts = TimeSamplerSpec::DEFAULT_BETA.sample(&mut stream(12, Purpose::Verify, 0), DRAWS);
    let uniform = bin_probs(&*reference_cdf(&TimeSamplerSpec::Uniform));
    assert!(chi_square(&histogram(&ts), &uniform, DRAWS) > critical(BINS - 1, 0.001));
}

#[test]
fn truncated_beta_mean() {
    let (a, b, c) = (1.0f64, 1.5, 0.999);
    let analytic = c * a / (a + b);
    assert!((analytic - 0.3996).abs() < 1e-12);
    let ts = TimeSamplerSpec::DEFAULT_BETA.sample(&mut stream(13, Purpose::Verify, 0), DRAWS);
    let mean = ts.iter().map(|&t| t as f64).sum::<f64>() / DRAWS as f64;
    assert!((mean - analytic).abs() < 0.002, "mean {mean}");
}

#[test]
fn logit_normal_median_is_location_sigmoid() {
    let spec = TimeSamplerSpec::logit_normal(0.7, 0.5).unwrap();
    let mut ts = spec.sample(&mut stream(14, Purpose::Verify, 0), 200_001);
    ts.sort_by(f32::total_cmp);
    let median = ts[100_000] as f64;
    let expect = 1.0 / (1.0 + (-0.7f64).exp());
    assert!((median - expect).abs() < 0.005, "median {median} vs {expect}");
}

#[test]
fn mode_with_zero_scale_is_uniform() {
    let spec = TimeSamplerSpec::mode(0.0).unwrap();
    let ts = spec.sample(&mut stream(15, Purpose::Verify, 0), DRAWS);
    let probs = vec![1.0 / BINS as f64; BINS];
    assert!(chi_square(&histogram(&ts), &probs, DRAWS) < critical(BINS - 1, 0.001));
}

#[test]
fn discrete_grid_frequencies_are_uniform() {
    let spec = ConsistencyTimeSpec::new(100, StepSizeMode::Discrete).unwrap();
    let mut rng = stream(16, Purpose::Verify, 0);
    let n = 500_000;
    let mut ct = vec![0u64; 100];
    for t in spec.sample_t_discrete(&mut rng, n) {
        let k = (t as f64 * 100.0).round() as usize;
        assert!((t as f64 - k as f64 / 100.0).abs() < 1e-6);
        ct[k] += 1;
    }
    let mut cd = vec![0u64; 100];
    for dt in spec.sample_dt(&mut rng, n) {
        let k = (dt as f64 * 100.0).round() as usize;
        assert!((1..=100).contains(&k));
        cd[k - 1] += 1;
    }
    let probs = vec![0.01; 100];
    let crit = critical(99, 0.001);
    assert!(chi_square(&ct, &probs, n) < crit);
    assert!(chi_square(&cd, &probs, n) < crit);
}

#[test]
fn continuous_step_sizes_have_uniform_mean() {
    let spec = ConsistencyTimeSpec::default();
    let dts = spec.sample_dt(&mut stream(17, Purpose::Verify, 0), DRAWS);
    let mean = dts.iter().map(|&d| d as f64).sum::<f64>() / DRAWS as f64;
    // Standard error is 1/sqrt(12·10^6) ≈ 2.9e-4.
    assert!((mean - 0.5).abs() < 0.0015, "mean {mean}");
    assert!(dts.iter().all(|&d| (0.0..=1.0).contains(&d)));
}

#[test]
fn proprio_mask_frequency() {
    let m = draw_proprio_mask(&mut stream(18, Purpose::Verify, 0), DRAWS, 0.25);
    let f = m.iter().filter(|&&b| b).count() as f64 / DRAWS as f64;
    assert!((f - 0.25).abs() < 0.005, "mask rate {f}");
    assert!(draw_proprio_mask(&mut stream(18, Purpose::Verify, 1), 1000, 0.0).iter().all(|&b| !b));
    assert!(draw_proprio_mask(&mut stream(18, Purpose::Verify, 2), 1000, 1.0).iter().all(|&b| b));
}

#[test]
fn sampling_is_reproducible_per_stream() {
    for spec in TimeSamplerSpec::ALL_DEFAULTS {
        let a = spec.sample(&mut stream(19, Purpose::Verify, 3), 1000);
        let b = spec.sample(&mut stream(19, Purpose::Verify, 3), 1000);
        let c = spec.sample(&mut stream(19, Purpose::Verify, 4), 1000);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

proptest! {
    #[test]
    fn mode_transform_is_monotone_and_bounded(u in 0.0f64..1.0, du in 1e-6f64..0.5, s in -0.5f64..1.29) {
        let v = (u + du).min(1.0);
        let (a, b) = (mode_transform(u, s), mode_transform(v, s));
        prop_assert!(b <= a + 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn cosmap_is_monotone_and_bounded(u in 0.0f64..1.0, du in 1e-6f64..0.5) {
        let v = (u + du).min(1.0);
        let (a, b) = (cosmap_transform(u), cosmap_transform(v));
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn samples_stay_in_unit_interval(seed in any::<u64>(), which in 0usize..5) {
        let spec = TimeSamplerSpec::ALL_DEFAULTS[which];
        for t in spec.sample(&mut stream(seed, Purpose::Verify, 0), 64) {
            prop_assert!((0.0..=1.0).contains(&t));
        }
    }
}
