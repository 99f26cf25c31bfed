use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adam settings out of range: {self:?}")))
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros =
            || params.iter().map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape()))).collect::<BTreeMap<_, _>>();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update; gradients are cleared afterwards.
    ///
    /// Every parameter must carry a gradient. Nothing is modified when one is
    /// missing.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in params.iter() {
            if p.grad.is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
            let m = self.m.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if m.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam moments",
                    lhs: m.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = T::of(c.lr);
        let (inv_bc1, inv_bc2, eps) = (T::of(1.0 / bc1), T::of(1.0 / bc2), T::of(c.eps));
        for (name, p) in params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            let m = self.m.get_mut(name).expect("checked above").data_mut();
            let v = self.v.get_mut(name).expect("moments mirror parameters").data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] * inv_bc1;
                let vh = v[i] * inv_bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
