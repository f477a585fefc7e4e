//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; nodes only reference
//! earlier nodes, so the node vector is already in topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::borrow::Cow;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, transpose_raw, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Log1p(Var),
    Abs(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Parameters can be borrowed for the lifetime `'a`
/// so that evaluating many small graphs does not copy weight matrices.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Graph::backward`]: one gradient buffer per node that
/// requires a gradient and is reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err(op, a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let in_n: usize = input.iter().product();
    if out == input {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - input.len();
    // a trailing-suffix input repeats every in_n elements
    if input == &out[offset..] {
        return (0..n).map(|i| i % in_n).collect();
    }
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + offset] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += g;
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// An owned leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A borrowed leaf; tracked iff `t.requires_grad`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(Cow::Borrowed(t), Op::Leaf, rg)
    }

    /// A borrowed leaf that is never tracked.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose expects a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::new(vec![c, r], transpose_raw(ta.data(), r, c))?;
        Ok(self.push_owned(out, Op::Transpose(a), &[a]))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let ma = broadcast_map(&shape, ta.shape());
            let mb = broadcast_map(&shape, tb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push_owned(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push_owned(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `ln(1 + x)`; inputs at or below -1 produce non-finite values.
    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln_1p, Op::Log1p(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Concatenates along the last axis; all other axes must match.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank() - 1].to_vec();
        let outer: usize = lead.iter().product();
        let mut width = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", self.value(*first).shape(), s));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(outer * width);
        for r in 0..outer {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(shape, data)?;
        Ok(self.push_owned(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax over the last axis. Entries whose mask value is
    /// `false` get exactly zero weight; a row with no unmasked entry is an
    /// error.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if let Some(m) = mask {
            if m.len() != tx.numel() {
                return Err(Error::Mask(format!(
                    "mask of length {} for logits of shape {:?}",
                    m.len(),
                    tx.shape()
                )));
            }
        }
        let mut data = vec![0.0; tx.numel()];
        for r in 0..tx.outer_len() {
            let row = tx.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            if !(0..d).any(keep) {
                return Err(Error::Mask(format!("row {r}: every key is masked")));
            }
            // non-finite logits propagate as NaN rather than masking the row
            let max = (0..d)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .reduce(|a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
                .expect("row has an unmasked key");
            let out = &mut data[r * d..(r + 1) * d];
            let mut total = 0.0;
            for j in 0..d {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_owned(out, Op::Softmax(x), &[x]))
    }

    /// Normalizes over the last axis, then applies `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(dim_err("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.outer_len();
        let mut normed = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normed[r * d + j] = n;
                data[r * d + j] = n * g[j] + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_owned(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let out = Tensor::new(out.shape().to_vec(), out.into_data())?;
        Ok(self.push_owned(out, Op::Reshape(a), &[a]))
    }

    /// Selects rows of a 2-d table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let n = t.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row index {bad} out of range for {n} rows")));
        }
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let data: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let out = Tensor::new(vec![rows.len(), t.shape()[1]], data)?;
        Ok(self.push_owned(out, Op::GatherRows(table, rows.to_vec()), &[table]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of nodes used more than
    /// once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| match grads[v.0].as_mut() {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
            None => grads[v.0] = Some(contrib),
        };
        let out = &self.nodes[i].value;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    acc(*a, matmul_nt_raw(g, tb.data(), m, n, k));
                }
                if needs(*b) {
                    acc(*b, matmul_tn_raw(ta.data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                acc(*a, transpose_raw(g, r, c));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !needs(v) {
                        continue;
                    }
                    let tv = self.value(v);
                    let contrib = if tv.shape() == out.shape() {
                        g.iter().map(|x| x * s).collect()
                    } else {
                        let map = broadcast_map(out.shape(), tv.shape());
                        let mut r = reduce_to(g, &map, tv.numel());
                        r.iter_mut().for_each(|x| *x *= s);
                        r
                    };
                    acc(v, contrib);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = broadcast_map(out.shape(), ta.shape());
                let mb = broadcast_map(out.shape(), tb.shape());
                if needs(*a) {
                    let prod: Vec<f64> = g.iter().zip(&mb).map(|(x, &j)| x * tb.data()[j]).collect();
                    acc(*a, reduce_to(&prod, &ma, ta.numel()));
                }
                if needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(&ma).map(|(x, &j)| x * ta.data()[j]).collect();
                    acc(*b, reduce_to(&prod, &mb, tb.numel()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect());
            }
            Op::Log1p(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| g / (1.0 + x)).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64)
                        .collect(),
                );
            }
            Op::Concat(parts) => {
                let width = out.last_dim();
                let rows = out.outer_len();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if needs(*p) {
                        let mut c = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            c.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        acc(*p, c);
                    }
                    offset += w;
                }
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let y = out.data();
                let mut c = vec![0.0; y.len()];
                for r in 0..out.outer_len() {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        c[r * d + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, c);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = out.last_dim();
                let rows = out.outer_len();
                let gn = self.value(*gain).data();
                if needs(*x) {
                    let mut c = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gs = &g[r * d..(r + 1) * d];
                        let ns = &normed[r * d..(r + 1) * d];
                        let dn: Vec<f64> = gs.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(ns).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            c[r * d + j] = inv_std[r] * (dn[j] - mean_dn - ns[j] * mean_dn_n);
                        }
                    }
                    acc(*x, c);
                }
                if needs(*gain) {
                    let mut c = vec![0.0; d];
                    for (k, (gv, nv)) in g.iter().zip(normed).enumerate() {
                        c[k % d] += gv * nv;
                    }
                    acc(*gain, c);
                }
                if needs(*bias) {
                    let mut c = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        c[k % d] += gv;
                    }
                    acc(*bias, c);
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::GatherRows(table, rows) => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut c = vec![0.0; t.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        c[r * d + j] += g[k * d + j];
                    }
                }
                acc(*table, c);
            }
        }
        Ok(())
    }
}

/// Elementwise operations addressable by name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    ConcatLastAxis,
    Scale(f64),
    Log1p,
}

impl<'a> Graph<'a> {
    /// Dispatches an [`Elementwise`] op over `inputs` (two for the binary
    /// ops, one for unary ops, one or more for concatenation).
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{op:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match op {
            Elementwise::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Elementwise::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Elementwise::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Elementwise::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Elementwise::Scale(c) => arity(1).map(|_| self.scale(inputs[0], c)),
            Elementwise::Log1p => arity(1).map(|_| self.log1p(inputs[0])),
            Elementwise::ConcatLastAxis => self.concat(inputs),
        }
    }
}
