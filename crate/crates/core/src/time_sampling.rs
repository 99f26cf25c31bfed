//! Timestep distributions for the flow-matching branch, and the discrete
//! grid / step-size draws used by the consistency branch.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Distribution of the flow-matching timestep `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeSamplerSpec {
    Uniform,
    /// `t = cutoff · u` with `u ~ Beta(alpha, beta)`.
    Beta {
        alpha: f64,
        beta: f64,
        cutoff: f64,
    },
    /// `t = sigmoid(z)` with `z ~ N(location, scale²)`.
    LogitNormal {
        location: f64,
        scale: f64,
    },
    /// `t = 1 - u - s·(cos²(πu/2) - 1 + u)`, clamped to [0, 1].
    Mode {
        scale: f64,
    },
    /// `t = 1 - 1/(tan(πu/2) + 1)`, clamped to [0, 1].
    Cosmap,
}

impl TimeSamplerSpec {
    pub const DEFAULT_BETA: Self = Self::Beta { alpha: 1.0, beta: 1.5, cutoff: 0.999 };
    pub const DEFAULT_LOGIT_NORMAL: Self = Self::LogitNormal { location: 0.0, scale: 1.0 };
    pub const DEFAULT_MODE: Self = Self::Mode { scale: 1.29 };

    /// The five samplers with their default parameters.
    pub const ALL_DEFAULTS: [Self; 5] =
        [Self::Uniform, Self::DEFAULT_BETA, Self::DEFAULT_LOGIT_NORMAL, Self::DEFAULT_MODE, Self::Cosmap];

    pub fn beta(alpha: f64, beta: f64, cutoff: f64) -> Result<Self> {
        let s = Self::Beta { alpha, beta, cutoff };
        s.validate()?;
        Ok(s)
    }

    pub fn logit_normal(location: f64, scale: f64) -> Result<Self> {
        let s = Self::LogitNormal { location, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn mode(scale: f64) -> Result<Self> {
        let s = Self::Mode { scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Uniform | Self::Cosmap => Ok(()),
            Self::Beta { alpha, beta, cutoff } => {
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return Err(invalid(format!("beta sampler needs α, β > 0 (got {alpha}, {beta})")));
                }
                if !(cutoff > 0.0 && cutoff <= 1.0) {
                    return Err(invalid(format!("beta cutoff must lie in (0, 1], got {cutoff}")));
                }
                Ok(())
            }
            Self::LogitNormal { location, scale } => {
                if !(scale > 0.0 && scale.is_finite() && location.is_finite()) {
                    return Err(invalid(format!(
                        "logit-normal needs finite location and scale > 0 (got {location}, {scale})"
                    )));
                }
                Ok(())
            }
            Self::Mode { scale } => {
                if !scale.is_finite() {
                    return Err(invalid(format!("mode scale must be finite, got {scale}")));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Beta { .. } => "beta",
            Self::LogitNormal { .. } => "logit_normal",
            Self::Mode { .. } => "mode",
            Self::Cosmap => "cosmap",
        }
    }

    /// One draw in f64.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Uniform => rng.random::<f64>(),
            Self::Beta { alpha, beta, cutoff } => {
                let u: f64 = Beta::new(alpha, beta).expect("validated").sample(rng);
                cutoff * u
            }
            Self::LogitNormal { location, scale } => {
                let z = Normal::new(location, scale).expect("validated").sample(rng);
                1.0 / (1.0 + (-z).exp())
            }
            Self::Mode { scale } => mode_transform(rng.random::<f64>(), scale).clamp(0.0, 1.0),
            Self::Cosmap => cosmap_transform(rng.random::<f64>()).clamp(0.0, 1.0),
        }
    }

    /// `n` i.i.d. draws of `t ∈ [0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.sample_one(rng) as f32).collect()
    }
}

/// Mode-sampling transform of a uniform `u` (before clamping).
pub fn mode_transform(u: f64, scale: f64) -> f64 {
    let c = (FRAC_PI_2 * u).cos();
    1.0 - u - scale * (c * c - 1.0 + u)
}

/// Cosmap transform of a uniform `u` (before clamping). `u = 1` maps to 1.
pub fn cosmap_transform(u: f64) -> f64 {
    let tan = (FRAC_PI_2 * u).tan();
    if u >= 1.0 || !tan.is_finite() {
        return 1.0;
    }
    // Same as 1 - 1/(tan + 1), without the cancellation near u = 1.
    tan / (tan + 1.0)
}

/// How the consistency branch draws its step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSizeMode {
    /// `Δt ~ U[0, 1]`.
    Continuous,
    /// `Δt` uniform over `{1/T, …, 1}` (shortcut-style).
    Discrete,
}

/// Time and step-size sampling for the consistency branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyTimeSpec {
    /// Size `T` of the discrete time grid `{0, 1/T, …, (T-1)/T}`.
    pub grid: usize,
    pub dt_mode: StepSizeMode,
}

impl Default for ConsistencyTimeSpec {
    fn default() -> Self {
        Self { grid: 100, dt_mode: StepSizeMode::Continuous }
    }
}

impl ConsistencyTimeSpec {
    pub fn new(grid: usize, dt_mode: StepSizeMode) -> Result<Self> {
        let s = Self { grid, dt_mode };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(invalid(format!("time grid needs T ≥ 2, got {}", self.grid)));
        }
        Ok(())
    }

    /// Smallest `1 - t` the grid can produce.
    pub fn min_remaining(&self) -> f64 {
        1.0 / self.grid as f64
    }

    pub fn sample_t_discrete<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f32> {
        (0..n).map(|_| (rng.random_range(0..self.grid) as f64 / self.grid as f64) as f32).collect()
    }

    pub fn sample_dt<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.sample_dt_one(rng) as f32).collect()
    }

    pub fn sample_dt_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.dt_mode {
            StepSizeMode::Continuous => rng.random::<f64>(),
            StepSizeMode::Discrete => rng.random_range(1..=self.grid) as f64 / self.grid as f64,
        }
    }
}
