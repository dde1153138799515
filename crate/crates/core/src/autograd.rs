//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node; node order is a
//! topological order, so the backward pass walks the tape in reverse and
//! accumulates gradients in a fixed sequence.

use indexmap::IndexMap;

use crate::ops::{self, axis_blocks, gemm_nt, gemm_tn, matmul_dims, NormCache};
use crate::params::ParameterStore;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache },
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Bce { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Parameters are bound by name from an optional
/// [`ParameterStore`]; frozen parameters enter as constants.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParameterStore>,
    bound: IndexMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
    track: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: IndexMap::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    pub fn with_params(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// A graph that records no gradient information (evaluation mode).
    pub fn inference(store: &'s ParameterStore) -> Self {
        Self {
            store: Some(store),
            track: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient regardless of any store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter from the store; repeated binds return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| TensorError::Invalid("graph has no parameter store".into()))?;
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter `{name}`")))?;
        let mut value = t.clone();
        value.grad = None;
        let trainable = !store.is_frozen(name);
        let v = self.push(value, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(row))?;
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = ops::mul_row(self.value(x), self.value(row))?;
        let rg = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = ops::scale(self.value(x), factor);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&tensors, axis)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice(self.value(x), axis, start, len)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let (_, extent, _) = axis_blocks(self.shape(x), axis)?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(TensorError::Invalid(format!(
                "split sizes {sizes:?} do not cover extent {extent}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.reshape(x, vec![n]).unwrap()
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = ops::mean(self.value(x));
        let rg = self.needs(x);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Mean binary cross-entropy of a vector of logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let loss = ops::bce_with_logits(self.value(logits).data(), labels)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// `x · w + b` for a rank-2 `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Runs the backward pass from a single-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a bound parameter; zeros when bound but unreached.
    pub fn param_grad(&self, name: &str) -> Option<Vec<f64>> {
        let &v = self.bound.get(name)?;
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            self.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.value(v).numel()]),
        )
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Adds this graph's parameter gradients into the store's accumulators.
    /// Gradients of every trainable bound parameter, in binding order.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .keys()
            .filter_map(|name| self.param_grad(name).map(|g| (name.clone(), g)))
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let d = matmul_dims(av, bv)?;
                if self.needs(a) {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..d.batch {
                        let dy_blk = &dy[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let b_blk = if d.shared_rhs {
                            bv.data()
                        } else {
                            &bv.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
                        };
                        gemm_nt(dy_blk, b_blk, &mut da[bi * d.m * d.k..(bi + 1) * d.m * d.k], d.m, d.n, d.k);
                    }
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..d.batch {
                        let dy_blk = &dy[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let a_blk = &av.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                        let db_blk = if d.shared_rhs {
                            &mut db[..]
                        } else {
                            &mut db[bi * d.k * d.n..(bi + 1) * d.k * d.n]
                        };
                        gemm_tn(a_blk, dy_blk, db_blk, d.m, d.k, d.n);
                    }
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.to_vec());
                self.accumulate(grads, b, dy.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    self.accumulate(grads, a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, dy.to_vec());
                if self.needs(row) {
                    let w = self.value(row).numel();
                    let mut dr = vec![0.0; w];
                    for chunk in dy.chunks_exact(w) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, row, dr);
                }
            }
            &Op::MulRow(x, row) => {
                let r = self.value(row).data();
                let w = r.len();
                if self.needs(x) {
                    let dx = dy
                        .chunks_exact(w)
                        .flat_map(|c| c.iter().zip(r).map(|(g, s)| g * s))
                        .collect();
                    self.accumulate(grads, x, dx);
                }
                if self.needs(row) {
                    let mut dr = vec![0.0; w];
                    for (gc, xc) in dy.chunks_exact(w).zip(self.value(x).data().chunks_exact(w)) {
                        for ((d, g), xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += g * xv;
                        }
                    }
                    self.accumulate(grads, row, dr);
                }
            }
            &Op::Scale(x, f) => self.accumulate(grads, x, dy.iter().map(|g| g * f).collect()),
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| g * ops::gelu_derivative(v))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_blocks(node.value.shape(), axis)?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let g = self.value(gamma).data();
                let w = g.len();
                if self.needs(gamma) {
                    let mut dg = vec![0.0; w];
                    for (dc, hc) in dy.chunks_exact(w).zip(cache.xhat.chunks_exact(w)) {
                        for ((d, a), h) in dg.iter_mut().zip(dc).zip(hc) {
                            *d += a * h;
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                }
                if self.needs(beta) {
                    let mut db = vec![0.0; w];
                    for dc in dy.chunks_exact(w) {
                        db.iter_mut().zip(dc).for_each(|(d, a)| *d += a);
                    }
                    self.accumulate(grads, beta, db);
                }
                if self.needs(x) {
                    let n = w as f64;
                    let mut dx = vec![0.0; dy.len()];
                    for (r, ((dc, hc), out)) in dy
                        .chunks_exact(w)
                        .zip(cache.xhat.chunks_exact(w))
                        .zip(dx.chunks_exact_mut(w))
                        .enumerate()
                    {
                        let inv = cache.inv_std[r];
                        let dh: Vec<f64> = dc.iter().zip(g).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hc).map(|(a, b)| a * b).sum();
                        for c in 0..w {
                            out[c] = inv / n * (n * dh[c] - sum_dh - hc[c] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Transpose(x) => {
                let dyt = Tensor::new(node.value.shape().to_vec(), dy.to_vec())?;
                self.accumulate(grads, x, ops::transpose(&dyt)?.into_data());
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let (outer, _, inner) = axis_blocks(node.value.shape(), axis)?;
                let total = node.value.shape()[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dp.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = axis_blocks(self.shape(x), axis)?;
                let len = node.value.shape()[axis];
                let mut dx = vec![0.0; self.value(x).numel()];
                for o in 0..outer {
                    let src = &dy[o * len * inner..(o + 1) * len * inner];
                    let base = o * extent * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, dy.to_vec()),
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&i, g) in index.iter().zip(dy) {
                    dx[i] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![dy[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![dy[0] / n as f64; n]);
            }
            &Op::SumSquares(x) => {
                let dx = self.value(x).data().iter().map(|v| 2.0 * v * dy[0]).collect();
                self.accumulate(grads, x, dx);
            }
            Op::Bce { logits, labels } => {
                let z = self.value(*logits).data();
                let n = z.len() as f64;
                let dz = z
                    .iter()
                    .zip(labels)
                    .map(|(&zi, &yi)| (ops::sigmoid(zi) - yi) / n * dy[0])
                    .collect();
                self.accumulate(grads, *logits, dz);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.variable(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // dA = 1·Bᵀ per row, dB = Aᵀ·1
        assert_eq!(g.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn unreached_parameters_get_zero_grad() {
        let mut store = ParameterStore::new();
        store.insert("used", Tensor::ones(&[3])).unwrap();
        store.insert("unused", Tensor::ones(&[2])).unwrap();
        let mut g = Graph::with_params(&store);
        let u = g.param("used").unwrap();
        let _ = g.param("unused").unwrap();
        let s = g.sum_squares(u);
        g.backward(s).unwrap();
        assert_eq!(g.param_grad("used").unwrap(), vec![2.0; 3]);
        assert_eq!(g.param_grad("unused").unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn frozen_parameters_receive_no_grad() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::ones(&[2])).unwrap();
        store.insert("p", Tensor::ones(&[2])).unwrap();
        store.set_freeze_mask(["w".to_string()].into()).unwrap();
        let mut g = Graph::with_params(&store);
        let w = g.param("w").unwrap();
        let p = g.param("p").unwrap();
        let y = g.mul(w, p).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.param_grad("w").is_none());
        assert_eq!(g.param_grad("p").unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::ones(&[2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shared_nodes_accumulate() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0]);
    }
}
