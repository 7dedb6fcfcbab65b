use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.lookup.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Adds a dense layer `name.w` (fan_in × fan_out) and `name.b`, both
    /// drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn init_dense(&mut self, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        let b = (0..fan_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("dense shape"));
        self.insert(format!("{name}.b"), Tensor::new(vec![fan_out], b).expect("dense shape"));
    }

    /// Bias-free projection `name.w`.
    pub fn init_linear(&mut self, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.insert(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("linear shape"));
    }

    /// Dense stack `name.0`, `name.1`, ... with the given widths.
    pub fn init_mlp(&mut self, rng: &mut impl Rng, name: &str, input: usize, widths: &[usize]) {
        let mut fan_in = input;
        for (i, &w) in widths.iter().enumerate() {
            self.init_dense(rng, &format!("{name}.{i}"), fan_in, w);
            fan_in = w;
        }
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = T::of(c);
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

/// A graph bound to a parameter store. Parameters enter the graph lazily on
/// first use, so parameters a forward pass never touches get zero gradient.
pub struct Ctx<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: HashMap<usize, Var>,
    trainable: bool,
}

impl<'p, T: Real> Ctx<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { graph: Graph::new(), params, bound: HashMap::new(), trainable: true }
    }

    /// Parameters enter as constants; nothing is recorded for backward.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { trainable: false, ..Self::new(params) }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let t = self.params.tensors[idx].clone();
        let v = if self.trainable { self.graph.leaf(name, t) } else { self.graph.constant(t) };
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// `x·W + b` with the layer stored under `name`.
    pub fn dense(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    /// `x·W` with `name.w`.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        self.graph.matmul(x, w)
    }

    /// Dense stack with ReLU between layers; `relu_last` also rectifies the
    /// final layer.
    pub fn mlp(&mut self, name: &str, x: Var, layers: usize, relu_last: bool) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            h = self.dense(&format!("{name}.{i}"), h)?;
            if i + 1 < layers || relu_last {
                h = self.graph.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Backward from `loss`, collected per parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut g: Gradients<T> = self.graph.backward(loss)?;
        let mut out = ParamGrads::zeros_like(self.params);
        for (&idx, &v) in &self.bound {
            if let Some(data) = g.take(v) {
                out.grads[idx] = Tensor::new(self.params.tensors[idx].shape().to_vec(), data)?;
            }
        }
        Ok(out)
    }
}
