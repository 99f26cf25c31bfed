use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    /// Uniform(-a, a) initialisation with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
        self.insert(name, Tensor::new([fan_in, fan_out], data)?)
    }

    /// Normal(0, std) initialisation for arbitrary shapes.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(std * rng.sample::<f64, _>(rand_distr::StandardNormal))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.clone()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Copy of the values in another precision; gradients are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, p)| (k.clone(), Param { value: p.value.cast(), grad: None })).collect(),
        }
    }

    /// Copy of the values without gradients.
    pub fn detached(&self) -> Self {
        self.cast()
    }

    /// L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_mirrors<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidShape(format!(
                "parameter sets differ in size ({} vs {})",
                self.params.len(),
                other.params.len()
            )));
        }
        for ((ka, pa), (kb, pb)) in self.params.iter().zip(other.params.iter()) {
            if ka != kb {
                return Err(Error::UnknownParam(format!("{ka} / {kb}")));
            }
            if pa.value.shape() != pb.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "parameter mirror",
                    lhs: pa.value.shape().to_vec(),
                    rhs: pb.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
