//! Sample-set distances. Sets are flat row-major buffers of width `dim`.

use crate::error::{invalid, Error, Result};

fn rows(a: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || !a.len().is_multiple_of(dim) {
        return Err(invalid(format!("buffer of {} values is not a set of {dim}-vectors", a.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(a.len() / dim)
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum()
}

fn mean_pairwise(a: &[f32], b: &[f32], dim: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for x in a.chunks_exact(dim) {
        for y in b.chunks_exact(dim) {
            acc += f(sq_dist(x, y));
        }
    }
    acc / ((a.len() / dim) * (b.len() / dim)) as f64
}

/// Energy distance `2E‖X-Y‖ - E‖X-X'‖ - E‖Y-Y'‖` with all pairs included
/// (V-statistic): zero for identical sets, non-negative and symmetric.
pub fn energy_distance(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    rows(a, dim)?;
    rows(b, dim)?;
    let d = |s: f64| s.sqrt();
    let ed = 2.0 * mean_pairwise(a, b, dim, d) - mean_pairwise(a, a, dim, d) - mean_pairwise(b, b, dim, d);
    Ok(ed.max(0.0))
}

/// Median heuristic bandwidth `σ²`: median squared distance among the first
/// 512 rows of the pooled set.
pub fn median_bandwidth(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    rows(a, dim)?;
    rows(b, dim)?;
    let pooled: Vec<&[f32]> = a.chunks_exact(dim).chain(b.chunks_exact(dim)).take(512).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return Ok(1.0);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(if *m > 0.0 { *m } else { 1.0 })
}

/// Squared MMD with an RBF kernel `exp(-‖x-y‖²/(2σ²))`, biased estimator.
pub fn mmd_rbf(a: &[f32], b: &[f32], dim: usize, sigma2: f64) -> Result<f64> {
    rows(a, dim)?;
    rows(b, dim)?;
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("kernel bandwidth must be > 0, got {sigma2}")));
    }
    let k = |s: f64| (-s / (2.0 * sigma2)).exp();
    let m = mean_pairwise(a, a, dim, k) + mean_pairwise(b, b, dim, k) - 2.0 * mean_pairwise(a, b, dim, k);
    Ok(m.max(0.0))
}

/// Fraction of rows assigned to each of `n_modes` labels (unassigned rows
/// count towards the total only).
pub fn mode_fractions(labels: &[Option<usize>], n_modes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_modes];
    for k in labels.iter().flatten() {
        if *k < n_modes {
            counts[*k] += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}
