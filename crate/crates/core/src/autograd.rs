//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. The graph is
//! rebuilt for every forward pass.
//!
//! Most operations work on matrices (`rows × cols`); the elementwise ops and
//! [`Graph::softmax`] accept any shape. Attention and cross-entropy are fused
//! kernels with hand-written adjoints because composing them from primitives
//! would be both slow and memory hungry.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Module, Param, Tensor};

const LN_EPS: f64 = 1e-5;
const MAGNITUDE_EPS: f64 = 1e-12;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    MeanRows(Var),
    NormalizeSum(Var),
    ScaleRows(Var, Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Magnitude(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Layout of a (possibly grouped) multi-head attention call.
///
/// Queries are `groups × n_query` rows and keys/values `groups × n_key` rows,
/// both group-major. Each group attends independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub groups: usize,
    pub n_query: usize,
    pub n_key: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is tracked iff the tensor `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(v) = self.params.get(&p.name) {
            return *v;
        }
        let v = self.leaf(&p.value);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Saved attention probabilities, laid out `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{op} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// `x + row`, broadcasting a length-`cols` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let b = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, row), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Scale(x, s), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, needs))
    }

    /// Multi-head scaled dot-product attention over projected `q`, `k`, `v`.
    ///
    /// Output has the same layout as `q`. With `causal`, query `i` only sees
    /// keys `0..=i`; masked keys are skipped outright, so nothing at a later
    /// position can influence an earlier output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = self.mat_dims(q, "attention")?;
        let (kr, dk) = self.mat_dims(k, "attention")?;
        let (vr, dv) = self.mat_dims(v, "attention")?;
        let AttentionSpec {
            groups,
            n_query,
            n_key,
            heads,
            causal,
        } = spec;
        if dk != d || dv != d || kr != vr {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if qr != groups * n_query || kr != groups * n_key {
            return Err(Error::Shape(format!(
                "attention layout {spec:?} does not match q rows {qr}, k rows {kr}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        if causal && n_query != n_key {
            return Err(Error::Shape("causal attention needs n_query == n_key".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; groups * heads * n_query * n_key];
        let mut scores = vec![0.0; n_key];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n_query {
                    let lim = if causal { i + 1 } else { n_key };
                    let qrow = &qs[(g * n_query + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(lim) {
                        let krow = &ks[(g * n_key + j) * d + off..][..dh];
                        *s = dot(qrow, krow) * scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(lim) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let prow = &mut probs[((g * heads + h) * n_query + i) * n_key..][..n_key];
                    let orow = &mut out[(g * n_query + i) * d + off..][..dh];
                    for j in 0..lim {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        let vrow = &vs[(g * n_key + j) * d + off..][..dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Tensor::matrix(qr, d, out)?, Op::Attention { q, k, v, spec, probs }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (_, n) = self.mat_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.mat_dims(p, "concat_rows")?;
            if n2 != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Rows `idx[0], idx[1], …` of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row index {bad} out of range for {m} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(idx.len(), n, out)?, Op::GatherRows(x, idx.to_vec()), needs))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("column index {bad} out of range for {n} columns")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            out.extend(idx.iter().map(|&j| xs[r * n + j]));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, idx.len(), out)?, Op::GatherCols(x, idx.to_vec()), needs))
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "mean_rows")?;
        if m == 0 {
            return Err(Error::Shape("mean of zero rows".into()));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            out.iter_mut().zip(&xs[r * n..]).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(x), needs))
    }

    /// `x / sum(x)` over every element.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Contract(format!("cannot normalise by sum {s}")));
        }
        let data = self.value(x).data().iter().map(|v| v / s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::NormalizeSum(x), needs))
    }

    /// Multiplies row `r` of `x` by the `r`-th element of `w`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x, "scale_rows")?;
        if self.value(w).len() != m {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(w)));
        }
        let ws = self.value(w).data();
        let xs = self.value(x).data();
        let out = (0..m * n).map(|i| xs[i] * ws[i / n]).collect();
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ScaleRows(x, w), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean over positions with `mask[i]` of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v).map(|(t, _)| t) {
            return Err(Error::Shape(format!("target id {bad} outside vocabulary of {v}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss("mask selects no positions".into()));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for i in (0..l).filter(|&i| mask[i]) {
            let row = &xs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Elementwise `sqrt(re² + im² + ε)`.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        self.same_shape(re, im, "magnitude")?;
        let data = zip_map(self.value(re).data(), self.value(im).data(), |a, b| {
            (a * a + b * b + MAGNITUDE_EPS).sqrt()
        });
        let t = Tensor::new(self.shape(re).to_vec(), data)?;
        let needs = self.needs(re) || self.needs(im);
        Ok(self.push(t, Op::Magnitude(re, im), needs))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                acc(*a, &mut |ga| {
                    // dA += dC · Bᵀ
                    gemm(m, n, k, dy, (n, 1), self.value(*b).data(), (1, n), ga, 1.0);
                });
                acc(*b, &mut |gb| {
                    // dB += Aᵀ · dC
                    gemm(k, m, n, self.value(*a).data(), (1, k), dy, (n, 1), gb, 1.0);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |g| add_into(g, dy));
                let n = self.value(*row).len();
                acc(*row, &mut |g| {
                    for chunk in dy.chunks(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(dy).for_each(|(a, d)| *a += s * d)),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (m, n) = dims2(self.value(*x));
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
                acc(*gamma, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[j] += dy[r * n + j] * xhat(r, j);
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for chunk in dy.chunks(n) {
                        add_into(g, chunk);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dxhat[j] = dy[r * n + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat(r, j);
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            g[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xhat(r, j) * mean_dx);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                g[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_backward(*q, *k, *v, spec, probs, dy, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |g| add_into(g, &dy[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let n = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &dy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::GatherCols(x, idx) => {
                let (m, n) = dims2(self.value(*x));
                let w = idx.len();
                acc(*x, &mut |g| {
                    for r in 0..m {
                        for (c, &j) in idx.iter().enumerate() {
                            g[r * n + j] += dy[r * w + c];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = dims2(self.value(*x));
                acc(*x, &mut |g| {
                    for r in 0..m {
                        for j in 0..n {
                            g[r * n + j] += dy[j] / m as f64;
                        }
                    }
                });
            }
            Op::NormalizeSum(x) => {
                let y = node.value.data();
                let s: f64 = self.value(*x).data().iter().sum();
                let dot: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += (dy[i] - dot) / s;
                    }
                });
            }
            Op::ScaleRows(x, w) => {
                let (m, n) = dims2(self.value(*x));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                acc(*x, &mut |g| {
                    for i in 0..m * n {
                        g[i] += dy[i] * wv[i / n];
                    }
                });
                acc(*w, &mut |g| {
                    for r in 0..m {
                        g[r] += dot(&dy[r * n..(r + 1) * n], &xv[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += dy[0])),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                acc(*logits, &mut |g| {
                    for i in (0..mask.len()).filter(|&i| mask[i]) {
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            g[i * v + j] += dy[0] * (probs[i * v + j] - onehot) / count;
                        }
                    }
                });
            }
            Op::Magnitude(re, im) => {
                let y = node.value.data();
                let rv = self.value(*re).data();
                let iv = self.value(*im).data();
                acc(*re, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * rv[i] / y[i];
                    }
                });
                acc(*im, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * iv[i] / y[i];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, spec: &AttentionSpec, probs: &[f64], dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionSpec {
            groups,
            n_query,
            n_key,
            heads,
            causal,
        } = *spec;
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut ds = vec![0.0; n_key];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n_query {
                    let lim = if causal { i + 1 } else { n_key };
                    let qi = (g * n_query + i) * d + off;
                    let prow = &probs[((g * heads + h) * n_query + i) * n_key..][..n_key];
                    let drow = &dy[qi..qi + dh];
                    let mut pdp = 0.0;
                    for j in 0..lim {
                        let vj = (g * n_key + j) * d + off;
                        let dp = dot(drow, &vs[vj..vj + dh]);
                        ds[j] = dp;
                        pdp += prow[j] * dp;
                        dv[vj..vj + dh].iter_mut().zip(drow).for_each(|(a, b)| *a += prow[j] * b);
                    }
                    for j in 0..lim {
                        let s = prow[j] * (ds[j] - pdp) * scale;
                        let kj = (g * n_key + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] += s * ks[kj + t];
                            dk[kj + t] += s * qs[qi + t];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                let buf = grads[var.0].get_or_insert_with(|| vec![0.0; local.len()]);
                add_into(buf, &local);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// Accumulates gradients into every parameter of `module` that requires
    /// them and was reached by the sweep. Other parameters are untouched.
    pub fn apply_to<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut res = Ok(());
        module.visit_params_mut(&mut |p| {
            if !p.value.requires_grad() || res.is_err() {
                return;
            }
            if let Some(g) = self.param(&p.name) {
                res = p.value.accumulate_grad(g);
            }
        });
        res
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every element addressed by the given dims
    // and strides (checked above for the dense layouts used in this crate).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::new();
        let x = g.constant(mat(1, 2, &[0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(mat(1, 2, &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 1).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 2, &[0.0, 1.0, 0.0, 1.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 256]));
        let loss = g.cross_entropy(x, &[5, 17, 255], &[true, true, true]).unwrap();
        assert!((g.scalar(loss) - 256f64.ln()).abs() < 1e-12);
        assert!((g.scalar(loss) - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_confident_logit_goes_to_zero() {
        let mut g = Graph::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[3] = 1e3;
        let x = g.constant(logits);
        let loss = g.cross_entropy(x, &[3], &[true]).unwrap();
        assert!(g.scalar(loss) < 1e-300);
    }

    #[test]
    fn cross_entropy_rejects_empty_mask() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let err = g.cross_entropy(x, &[0, 1], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::DegenerateLoss(_)));
    }

    #[test]
    fn unmasked_positions_do_not_contribute() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[2, 4]);
        t.data_mut()[4] = 50.0;
        let x = g.constant(t);
        let a = g.cross_entropy(x, &[0, 1], &[true, false]).unwrap();
        assert!((g.scalar(a) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&mat(1, 2, &[1.0, 2.0]).with_requires_grad(true));
        let b = g.leaf(&mat(2, 1, &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn causal_attention_ignores_future() {
        let spec = AttentionSpec {
            groups: 1,
            n_query: 3,
            n_key: 3,
            heads: 1,
            causal: true,
        };
        let base = mat(3, 2, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]);
        let mut later = base.clone();
        later.data_mut()[4] = 9.0;
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let y = g.attention(x, x, x, spec).unwrap();
            g.value(y).data()[..4].to_vec()
        };
        assert_eq!(run(&base), run(&later));
    }
}
