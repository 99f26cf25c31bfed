//! Plot-ready delimited files: timestep-sampler histograms, sample scatter
//! and loss curves.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use maniflow_core::rng::{stream, Purpose};
use maniflow_core::time_sampling::TimeSamplerSpec;

use crate::container::Container;
use crate::metrics::{parse, LogRow};

pub const BINS: usize = 50;

/// Counts of `ts` in 50 equal bins over [0, 1]; `t = 1` falls in the last bin.
pub fn histogram(ts: &[f32]) -> Vec<u64> {
    let mut c = vec![0u64; BINS];
    for &t in ts {
        let b = ((t as f64 * BINS as f64).floor() as usize).min(BINS - 1);
        c[b] += 1;
    }
    c
}

/// `bin_lo,bin_hi,<sampler>...` with empirical frequencies per bin.
pub fn sampler_histograms(draws: usize, seed: u64) -> String {
    let specs = TimeSamplerSpec::ALL_DEFAULTS;
    let counts: Vec<Vec<u64>> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| histogram(&s.sample(&mut stream(seed, Purpose::Verify, i as u64), draws)))
        .collect();
    let mut out = String::from("bin_lo,bin_hi");
    for s in &specs {
        out.push(',');
        out.push_str(s.name());
    }
    out.push('\n');
    for b in 0..BINS {
        out.push_str(&format!("{},{}", b as f64 / BINS as f64, (b + 1) as f64 / BINS as f64));
        for c in &counts {
            out.push_str(&format!(",{}", c[b] as f64 / draws.max(1) as f64));
        }
        out.push('\n');
    }
    out
}

/// Loss rows of a metrics log as `step,fm_loss,ct_loss,joint_loss,grad_norm`.
pub fn loss_curves(metrics: &str) -> Result<String> {
    let mut out = String::from("step,fm_loss,ct_loss,joint_loss,grad_norm\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for row in parse(metrics)? {
        if let LogRow::Train { step, fm_loss, ct_loss, joint_loss, grad_norm } = row {
            out.push_str(&format!("{step},{},{},{joint_loss},{grad_norm}\n", opt(fm_loss), opt(ct_loss)));
        }
    }
    Ok(out)
}

/// Evaluation rows of a metrics log as `step,n_steps,metric,value`.
pub fn eval_curves(metrics: &str) -> Result<String> {
    let mut out = String::from("step,n_steps,metric,value\n");
    for row in parse(metrics)? {
        if let LogRow::Eval { step, n_steps, metric, value } = row {
            out.push_str(&format!("{step},{n_steps},{metric},{value}\n"));
        }
    }
    Ok(out)
}

/// Sample rows with one column per coordinate (`x0,x1,...`).
pub fn scatter(samples: &Container) -> Result<String> {
    let (shape, data) = samples.get("samples")?;
    ensure!(shape.len() == 2, "samples must be [N, D], got {shape:?}");
    let d = shape[1];
    let mut out = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    if d > 0 {
        for r in data.chunks_exact(d) {
            out.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes every plot file that the given inputs allow into `out`; returns
/// the file names written.
pub fn emit(
    metrics: Option<&Path>,
    samples: Option<&Path>,
    draws: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        fs::write(out.join(name), text).with_context(|| format!("writing {name}"))?;
        written.push(name.to_string());
        Ok(())
    };
    put("timestep_hist.csv", sampler_histograms(draws, seed))?;
    if let Some(m) = metrics {
        let text = fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
        put("loss.csv", loss_curves(&text)?)?;
        put("eval.csv", eval_curves(&text)?)?;
    }
    if let Some(s) = samples {
        put("scatter.csv", scatter(&Container::read_kind(s, "samples")?)?)?;
    }
    Ok(written)
}
