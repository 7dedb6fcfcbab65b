//! Define-by-run reverse-mode tape.
//!
//! Every op evaluates eagerly and records its inputs, so node indices are a
//! topological order by construction and backward is a single reverse sweep.

use std::hash::{Hash, Hasher};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Relu { a: Var },
    Softmax { a: Var },
    ReduceMax { a: Var, axis: usize, argmax: Vec<usize> },
    ReduceSum { a: Var, axis: usize },
    Broadcast { a: Var },
    Reshape { a: Var },
    Gather { a: Var, index: Vec<usize> },
    Sqrt { a: Var },
    Recip { a: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Sqrt { .. } => "sqrt",
            Op::Recip { .. } => "recip",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. leaf `v`; zeros when `v` did not
    /// participate. Gradients of interior nodes are not retained.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn label(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].label.as_deref()
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Trainable leaf; `name` is reported in shape and numeric errors.
    pub fn leaf(&mut self, name: &str, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.nodes[v.0].label = Some(name.to_string());
        v
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, label: None });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Tensor<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::GraphShape { node: format!("{op}#{}", self.nodes.len()), detail }
    }

    fn check_var(&self, op: &str, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(self.shape_err(op, format!("unknown input node {}", v.0)));
        }
        Ok(())
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check_var("matmul", a)?;
        self.check_var("matmul", b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(self.shape_err("matmul", format!("rank-2 operands required, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner extents differ: {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" })));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.record(Op::MatMul { a, b, ta, tb }, t, &[a, b]))
    }

    fn check_broadcast(&self, op: &str, a: Var, b: Var) -> Result<()> {
        self.check_var(op, a)?;
        self.check_var(op, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err(op, format!("{sb:?} does not broadcast over leading axes of {sa:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b).data();
        let w = bv.len();
        let data = av
            .data()
            .chunks(w)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("broadcast shape")
    }

    /// Element-wise sum; `b` may be repeated over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        Ok(self.record(Op::Add { a, b }, t, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        Ok(self.record(Op::Sub { a, b }, t, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        Ok(self.record(Op::Mul { a, b }, t, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_var("scale", a)?;
        let ct = T::of(c);
        let t = self.value(a).map(|x| x * ct);
        Ok(self.record(Op::Scale { a, c }, t, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no inputs".into()));
        }
        for &p in parts {
            self.check_var("concat", p)?;
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(self.shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(self.shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(Op::Concat { parts: parts.to_vec(), axis }, t, parts))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_var("slice", a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(self.shape_err("slice", format!("range {start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(shape, data)?;
        Ok(self.record(Op::Slice { a, axis, start }, t, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_var("relu", a)?;
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.record(Op::Relu { a }, t, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_var("softmax", a)?;
        let v = self.value(a);
        let w = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.record(Op::Softmax { a }, t, &[a]))
    }

    fn reduced_shape(&self, op: &str, a: Var, axis: usize) -> Result<Vec<usize>> {
        self.check_var(op, a)?;
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(self.shape_err(op, format!("axis {axis} out of range for {s:?}")));
        }
        let mut out = s.to_vec();
        out.remove(axis);
        Ok(out)
    }

    /// Maximum along `axis`, removing it. Ties route the gradient to the
    /// first maximal element.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out_shape = self.reduced_shape("reduce_max", a, axis)?;
        let (outer, n, inner) = split_axis(self.shape(a), axis);
        let src = self.value(a).data();
        let mut data = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let x = src[base + i];
                    let slot = o * inner + i;
                    if x > data[slot] || k == 0 {
                        data[slot] = x;
                        argmax[slot] = k;
                    }
                }
            }
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.record(Op::ReduceMax { a, axis, argmax }, t, &[a]))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out_shape = self.reduced_shape("reduce_sum", a, axis)?;
        let (outer, n, inner) = split_axis(self.shape(a), axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += x;
                }
            }
        }
        let t = Tensor::new(out_shape, data)?;
        Ok(self.record(Op::ReduceSum { a, axis }, t, &[a]))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.reduce_sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Result<Var> {
        self.check_var("broadcast", a)?;
        if n == 0 {
            return Err(self.shape_err("broadcast", "zero repeat count".into()));
        }
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(n);
        let t = Tensor::new(shape, data)?;
        Ok(self.record(Op::Broadcast { a }, t, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var("reshape", a)?;
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(self.shape_err("reshape", format!("{:?} into {shape:?}", v.shape())));
        }
        let t = v.clone().reshaped(shape.to_vec())?;
        Ok(self.record(Op::Reshape { a }, t, &[a]))
    }

    /// Selects leading-axis slices of `a` by index (repeats allowed).
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check_var("gather", a)?;
        let v = self.value(a);
        let rows = v.rows();
        if v.rank() == 0 || index.is_empty() {
            return Err(self.shape_err("gather", "needs rank ≥ 1 and a non-empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let w = v.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.record(Op::Gather { a, index: index.to_vec() }, t, &[a]))
    }

    /// Square root with the derivative taken as zero at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check_var("sqrt", a)?;
        if let Some(x) = self.value(a).data().iter().find(|&&x| x < T::zero()) {
            return Err(self.shape_err("sqrt", format!("negative input {x}")));
        }
        let t = self.value(a).map(|x| x.sqrt());
        Ok(self.record(Op::Sqrt { a }, t, &[a]))
    }

    /// Reciprocal with `recip(0) = 0` and zero derivative there.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check_var("recip", a)?;
        let t = self.value(a).map(|x| if x == T::zero() { T::zero() } else { T::one() / x });
        Ok(self.record(Op::Recip { a }, t, &[a]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("loss node {} has not been evaluated", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Only leaf gradients are kept; intermediates are released as the
            // sweep passes them.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.wants(a) {
                    // dA = g·op(B)ᵀ, stored transposed when A was.
                    Self::accumulate(grads, a, av.len(), |da| {
                        if ta {
                            T::gemm(k, n, m, bv.data(), tb, g, true, da, true);
                        } else {
                            T::gemm(m, n, k, g, false, bv.data(), !tb, da, true);
                        }
                    });
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, bv.len(), |db| {
                        if tb {
                            T::gemm(n, m, k, g, true, av.data(), ta, db, true);
                        } else {
                            T::gemm(k, m, n, av.data(), !ta, g, false, db, true);
                        }
                    });
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(op, Op::Sub { .. });
                if self.wants(a) {
                    Self::accumulate(grads, a, g.len(), |da| {
                        da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    });
                }
                if self.wants(b) {
                    let w = self.value(b).len();
                    Self::accumulate(grads, b, w, |db| {
                        for chunk in g.chunks(w) {
                            for (d, &x) in db.iter_mut().zip(chunk) {
                                if neg {
                                    *d -= x;
                                } else {
                                    *d += x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let w = bv.len();
                if self.wants(a) {
                    Self::accumulate(grads, a, av.len(), |da| {
                        for (dchunk, gchunk) in da.chunks_mut(w).zip(g.chunks(w)) {
                            for ((d, &x), &y) in dchunk.iter_mut().zip(gchunk).zip(bv) {
                                *d += x * y;
                            }
                        }
                    });
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, w, |db| {
                        for (gchunk, achunk) in g.chunks(w).zip(av.chunks(w)) {
                            for ((d, &x), &y) in db.iter_mut().zip(gchunk).zip(achunk) {
                                *d += x * y;
                            }
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                let c = T::of(c);
                Self::accumulate(grads, a, g.len(), |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
                });
            }
            Op::Concat { ref parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), axis);
                let total = out.shape()[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[axis] * inner;
                    if self.wants(p) {
                        let len = self.value(p).len();
                        Self::accumulate(grads, p, len, |dp| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                for (d, &x) in dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += x;
                                }
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.shape(a);
                let (outer, n, inner) = split_axis(src_shape, axis);
                let len = self.value(a).len();
                let span = out.shape()[axis] * inner;
                Self::accumulate(grads, a, len, |da| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        for (d, &x) in da[base..base + span].iter_mut().zip(&g[o * span..(o + 1) * span]) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Relu { a } => {
                let av = self.value(a).data();
                Self::accumulate(grads, a, av.len(), |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(av) {
                        if y > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let w = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                Self::accumulate(grads, a, y.len(), |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::ReduceMax { a, axis, ref argmax } => {
                let (_, n, inner) = split_axis(self.shape(a), axis);
                let len = self.value(a).len();
                Self::accumulate(grads, a, len, |da| {
                    for (slot, (&k, &x)) in argmax.iter().zip(g).enumerate() {
                        let (o, i) = (slot / inner, slot % inner);
                        da[(o * n + k) * inner + i] += x;
                    }
                });
            }
            Op::ReduceSum { a, axis } => {
                let (outer, n, inner) = split_axis(self.shape(a), axis);
                let len = self.value(a).len();
                Self::accumulate(grads, a, len, |da| {
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for (d, &x) in da[base..base + inner].iter_mut().zip(gsrc) {
                                *d += x;
                            }
                        }
                    }
                });
            }
            Op::Broadcast { a } => {
                let w = self.value(a).len();
                Self::accumulate(grads, a, w, |da| {
                    for chunk in g.chunks(w) {
                        da.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            Op::Reshape { a } => {
                Self::accumulate(grads, a, g.len(), |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                });
            }
            Op::Gather { a, ref index } => {
                let av = self.value(a);
                let w = av.row_len();
                Self::accumulate(grads, a, av.len(), |da| {
                    for (r, &i) in index.iter().enumerate() {
                        for (d, &x) in da[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Sqrt { a } => {
                let y = out.data();
                let half = T::of(0.5);
                Self::accumulate(grads, a, y.len(), |da| {
                    for ((d, &x), &yi) in da.iter_mut().zip(g).zip(y) {
                        if yi > T::zero() {
                            *d += x * half / yi;
                        }
                    }
                });
            }
            Op::Recip { a } => {
                let y = out.data();
                Self::accumulate(grads, a, y.len(), |da| {
                    for ((d, &x), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d -= x * yi * yi;
                    }
                });
            }
        }
    }

    /// Hash of every piecewise choice the forward pass made: ReLU masks,
    /// max-pool winners and gather indices. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Relu { a } => {
                    i.hash(&mut h);
                    for &x in self.value(a).data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::ReduceMax { ref argmax, .. } => (i, argmax).hash(&mut h),
                Op::Gather { ref index, .. } => (i, index).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Name of the op that produced `v`, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
