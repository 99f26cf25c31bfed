use std::collections::{BTreeMap, HashMap};

use super::{gemm, MatRef, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const SINUSOID_MAX_PERIOD: f64 = 10_000.0;
/// Inputs in [0, 1] are stretched onto the usual diffusion timestep range
/// before the sinusoid bank is applied.
const SINUSOID_INPUT_SCALE: f64 = 1000.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Mean(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { src: Var, rstd: Vec<T> },
    Embedding { table: Var, indices: Vec<usize> },
    AddBias(Var, Var),
    Expand { src: Var, axis: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// A tape is built for one forward pass and dropped afterwards. Parameters
/// are bound by name from a [`ParamStore`]; on a tape created with
/// [`Tape::no_grad`] they are bound as constants and nothing is recorded for
/// differentiation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires
/// gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Real = f32> {
    by_var: HashMap<Var, Tensor<T>>,
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Adds each parameter gradient into the matching slot of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, g) in &self.by_param {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }
}

fn is_single(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 || data.is_empty() {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // Odometer over the outer output axes; the innermost axis is a strided run.
    let (inner, inner_stride) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..data.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= idx[d] * src_strides[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh through exp: libm's tanhf dominates the profile otherwise.
    let th = T::one() - T::of(2.0) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), grad_enabled: true }
    }

    /// A tape on which parameters are bound as constants.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (when the tape records gradients).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Casts an `f32` tensor onto this tape as a constant.
    pub fn input(&mut self, value: &Tensor<f32>) -> Var {
        self.constant(value.cast())
    }

    /// Binds a named parameter; repeated binds of one name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let rg = self.grad_enabled;
        let v = self.push(value, Op::Param, rg);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || is_single(sb) {
            Ok(sa.to_vec())
        } else if is_single(sa) {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        mk: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let shape = self.binary_shape(op, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.map_value(a, |x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.map_value(a, |x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn map_value(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(a);
        Tensor { shape: src.shape().to_vec(), data: src.data().iter().map(|&x| f(x)).collect() }
    }

    /// `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, vec![m, n]),
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n, vec![b, m, n]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::InvalidShape(format!("transpose needs rank ≥ 2, got {shape:?}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, &axes);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Transpose(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid =
            axes.len() == shape.len() && axes.iter().all(|&x| x < seen.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(Error::InvalidShape(format!("permute {axes:?} of {shape:?}")));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let value = Tensor { shape: shape.to_vec(), data: self.value(a).data().to_vec() };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::InvalidShape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let conform =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conform {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape(format!("slice [{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, alen, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Slice { src: a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let s = src.iter().fold(T::zero(), |acc, &x| acc + x) / T::of(src.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::InvalidShape(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let inv = T::one() / T::of(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|x| *x *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::MeanAxis(a, axis), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map_value(a, |x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map_value(a, |x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map_value(a, |x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or(Error::InvalidShape("softmax of a scalar".into()))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x = *x / s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().ok_or(Error::InvalidShape("layer_norm of a scalar".into()))?;
        let mut data = self.value(a).data().to_vec();
        let inv_w = T::one() / T::of(w as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut rstd = Vec::with_capacity(data.len() / w);
        for row in data.chunks_mut(w) {
            let mu = row.iter().fold(T::zero(), |s, &x| s + x) * inv_w;
            let var = row.iter().fold(T::zero(), |s, &x| s + (x - mu) * (x - mu)) * inv_w;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * r);
            rstd.push(r);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { src: a, rstd }, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let (vocab, d) = match shape.as_slice() {
            &[v, d] => (v, d),
            _ => return Err(Error::InvalidShape(format!("embedding table {shape:?}"))),
        };
        if indices.is_empty() {
            return Err(Error::InvalidShape("embedding lookup of no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidShape(format!("embedding index {bad} ≥ vocab {vocab}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let value = Tensor { shape: vec![indices.len(), d], data };
        Ok(self.push(value, Op::Embedding { table, indices: indices.to_vec() }, rg))
    }

    /// Adds a `[w]` vector to every length-`w` row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sa, rhs: sb });
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(b.len()) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor { shape: sa, data }, Op::AddBias(a, bias), rg))
    }

    /// Inserts a new axis at `axis` and repeats the input `n` times along it.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::InvalidShape(format!("expand axis {axis} ×{n} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Expand { src: a, axis }, rg))
    }

    /// Sinusoidal features `[sin(v·ω_i)…, cos(v·ω_i)…]` for each value, as a
    /// `[values.len(), dim]` constant.
    pub fn sinusoidal(&mut self, values: &[T], dim: usize) -> Result<Var> {
        if dim < 2 || !dim.is_multiple_of(2) || values.is_empty() {
            return Err(Error::InvalidShape(format!(
                "sinusoidal features need an even dim ≥ 2 and ≥ 1 value (dim {dim}, {} values)",
                values.len()
            )));
        }
        let half = dim / 2;
        let freqs: Vec<f64> = (0..half).map(|i| (-(SINUSOID_MAX_PERIOD.ln()) * i as f64 / half as f64).exp()).collect();
        let mut data = Vec::with_capacity(values.len() * dim);
        for &v in values {
            let v = v.f64() * SINUSOID_INPUT_SCALE;
            data.extend(freqs.iter().map(|f| T::of((v * f).sin())));
            data.extend(freqs.iter().map(|f| T::of((v * f).cos())));
        }
        Ok(self.constant(Tensor { shape: vec![values.len(), dim], data }))
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if !is_single(ls) {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients::default());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = Gradients::default();
        let names: HashMap<Var, &String> = self.params.iter().map(|(k, v)| (*v, k)).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let data = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let t = Tensor { shape: node.value.shape().to_vec(), data };
            if let Some(name) = names.get(&Var(id)) {
                out.by_param.insert((*name).clone(), t.clone());
            }
            out.by_var.insert(Var(id), t);
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `store`.
    /// Parameters bound on this tape but unreachable from `loss` receive a
    /// zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store)?;
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.numel()]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                for (v, s) in [(*a, T::one()), (*b, sign)] {
                    acc(v, &mut |dst| {
                        if dst.len() == g.len() {
                            dst.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
                        } else {
                            dst[0] += s * g.iter().fold(T::zero(), |acc, &x| acc + x);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = val(other);
                    acc(v, &mut |dst| {
                        let ov = |i: usize| if o.len() == 1 { o[0] } else { o[i] };
                        if dst.len() == g.len() {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d += g[i] * ov(i);
                            }
                        } else {
                            dst[0] += (0..g.len()).fold(T::zero(), |s, i| s + g[i] * ov(i));
                        }
                    });
                }
            }
            Op::Scale(a, s) => acc(*a, &mut |dst| dst.iter_mut().zip(g).for_each(|(d, &x)| *d += *s * x)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |dst| dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (batch, m, k) = match *sa {
                    [m, k] => (1, m, k),
                    [b, m, k] => (b, m, k),
                    _ => unreachable!(),
                };
                let n = *sb.last().unwrap();
                let (da, db) = (val(*a), val(*b));
                acc(*a, &mut |dst| {
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut dst[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |dst| {
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut dst[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Transpose(a) => {
                let shape = node.value.shape();
                let r = shape.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                let (back, _) = permute_data(g, shape, &axes);
                acc(*a, &mut |dst| dst.iter_mut().zip(&back).for_each(|(d, &x)| *d += x));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inv[x] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                acc(*a, &mut |dst| dst.iter_mut().zip(&back).for_each(|(d, &x)| *d += x));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |dst| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let d = &mut dst[o * len * inner..(o + 1) * len * inner];
                            d.iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, alen, inner) = axis_split(self.nodes[src.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                acc(*src, &mut |dst| {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let gs = &g[o * len * inner..(o + 1) * len * inner];
                        dst[base..base + len * inner].iter_mut().zip(gs).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |dst| dst.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::of(self.nodes[a.0].value.numel() as f64);
                acc(*a, &mut |dst| dst.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = axis_split(self.nodes[a.0].value.shape(), *axis);
                let inv = T::one() / T::of(len as f64);
                acc(*a, &mut |dst| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dst[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |dst| {
                    for i in 0..dst.len() {
                        if x[i] > T::zero() {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * gelu_parts(x[i]).1;
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                acc(*a, &mut |dst| {
                    for r in 0..y.len() / w {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        for j in 0..w {
                            dst[r * w + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { src, rstd } => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let inv_w = T::one() / T::of(w as f64);
                acc(*src, &mut |dst| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let gm = gr.iter().fold(T::zero(), |s, &x| s + x) * inv_w;
                        let gym = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q) * inv_w;
                        for j in 0..w {
                            dst[r * w + j] += rs * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = node.value.shape()[1];
                acc(*table, &mut |dst| {
                    for (row, &i) in indices.iter().enumerate() {
                        dst[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |dst| dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |dst| {
                    let w = dst.len();
                    for row in g.chunks(w) {
                        dst.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Expand { src, axis } => {
                let shape = node.value.shape();
                let n = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                acc(*src, &mut |dst| {
                    for o in 0..outer {
                        for r in 0..n {
                            let gs = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            dst[o * inner..(o + 1) * inner].iter_mut().zip(gs).for_each(|(d, &x)| *d += x);
                        }
                    }
                });
            }
        }
    }
}
