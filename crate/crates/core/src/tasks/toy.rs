use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Unconditional 2D multimodal distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyDistribution {
    /// Equal-weight isotropic Gaussians centred on a circle.
    GaussianRing { modes: usize, radius: f64, sigma: f64 },
    /// Two interleaved half circles with Gaussian noise, centred at the origin.
    TwoMoons { noise: f64 },
}

const MOON_OFFSET: [f64; 2] = [0.5, 0.25];
const MOON_QUADRATURE: usize = 512;

impl ToyDistribution {
    pub fn ring(modes: usize, radius: f64, sigma: f64) -> Result<Self> {
        let d = Self::GaussianRing { modes, radius, sigma };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::GaussianRing { modes, radius, sigma } => {
                if modes == 0 || !(radius >= 0.0) || !(sigma > 0.0) {
                    return Err(invalid(format!(
                        "ring needs ≥ 1 mode, radius ≥ 0 and σ > 0 (got {modes}, {radius}, {sigma})"
                    )));
                }
            }
            Self::TwoMoons { noise } => {
                if !(noise > 0.0) {
                    return Err(invalid(format!("two-moons noise must be > 0, got {noise}")));
                }
            }
        }
        Ok(())
    }

    pub fn num_modes(&self) -> usize {
        match *self {
            Self::GaussianRing { modes, .. } => modes,
            Self::TwoMoons { .. } => 2,
        }
    }

    fn sigma(&self) -> f64 {
        match *self {
            Self::GaussianRing { sigma, .. } => sigma,
            Self::TwoMoons { noise } => noise,
        }
    }

    /// Ring centres (empty for two moons).
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match *self {
            Self::GaussianRing { modes, radius, .. } => (0..modes)
                .map(|k| {
                    let a = TAU * k as f64 / modes as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            Self::TwoMoons { .. } => Vec::new(),
        }
    }

    fn moon_point(moon: usize, theta: f64) -> [f64; 2] {
        let p = if moon == 0 { [theta.cos(), theta.sin()] } else { [1.0 - theta.cos(), 0.5 - theta.sin()] };
        [p[0] - MOON_OFFSET[0], p[1] - MOON_OFFSET[1]]
    }

    /// One draw and the index of the component it came from.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 2], usize) {
        let s = self.sigma();
        let (mean, k) = match *self {
            Self::GaussianRing { modes, .. } => {
                let k = rng.random_range(0..modes);
                (self.centers()[k], k)
            }
            Self::TwoMoons { .. } => {
                let k = rng.random_range(0..2);
                (Self::moon_point(k, rng.random::<f64>() * PI), k)
            }
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        ([mean[0] + s * nx, mean[1] + s * ny], k)
    }

    /// `n` draws as a flat `[n, 2]` buffer.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f32> {
        (0..n)
            .flat_map(|_| {
                let (p, _) = self.sample_one(rng);
                [p[0] as f32, p[1] as f32]
            })
            .collect()
    }

    /// Probability density at `p`. Two moons integrates the noise kernel
    /// along each arc with the midpoint rule.
    pub fn density(&self, p: [f64; 2]) -> f64 {
        let s = self.sigma();
        let kernel = |m: [f64; 2]| {
            let d2 = (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
            (-d2 / (2.0 * s * s)).exp() / (TAU * s * s)
        };
        match *self {
            Self::GaussianRing { modes, .. } => self.centers().into_iter().map(kernel).sum::<f64>() / modes as f64,
            Self::TwoMoons { .. } => {
                let mut acc = 0.0;
                for moon in 0..2 {
                    for i in 0..MOON_QUADRATURE {
                        let theta = PI * (i as f64 + 0.5) / MOON_QUADRATURE as f64;
                        acc += kernel(Self::moon_point(moon, theta));
                    }
                }
                acc / (2 * MOON_QUADRATURE) as f64
            }
        }
    }

    /// Mode of `p`: nearest ring centre (or moon arc) if within 3σ.
    pub fn assign_mode(&self, p: [f64; 2]) -> Option<usize> {
        let limit = 3.0 * self.sigma();
        let dist = |m: [f64; 2]| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt();
        let (k, d) = match *self {
            Self::GaussianRing { .. } => {
                self.centers().into_iter().enumerate().map(|(k, c)| (k, dist(c))).min_by(|a, b| a.1.total_cmp(&b.1))?
            }
            Self::TwoMoons { .. } => (0..2)
                .map(|moon| {
                    let d = (0..=MOON_QUADRATURE)
                        .map(|i| dist(Self::moon_point(moon, PI * i as f64 / MOON_QUADRATURE as f64)))
                        .fold(f64::INFINITY, f64::min);
                    (moon, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))?,
        };
        (d <= limit).then_some(k)
    }
}
