use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    SruScan(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::SruScan(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::MeanRows(a)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Softmax(a)
            | Op::L2NormalizeRows(a, _) => vec![*a],
            Op::ConcatLast(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are created in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bindings.push((id, v));
        self.bound.insert(id, v);
        v
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. `None` for leaves never reached by
    /// a backward pass (their gradient is zero).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).len()])
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::dim(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                ta.shape(),
                tb.shape(),
            )
        })?;
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n)
            .map(|i| {
                let (x, y) = (da[i % la], db[i % lb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary(kind, a, b)))
    }

    /// Elementwise sum; the smaller operand may broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Abs => f64::abs,
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary(kind, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sums away the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        let data = t.iter_rows().map(|r| r.iter().sum()).collect();
        self.push(Tensor::from_parts(shape, data), Op::SumLast(a))
    }

    /// Row mean of a matrix: `[r×c] -> [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim("mean_rows", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for row in t.iter_rows() {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a)))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat"))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ConcatLast(parts.to_vec()),
        ))
    }

    /// Stacks matrices (or vectors, as single rows) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("concat"))?;
        let c = self.value(first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.last_dim() != c {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.outer_len();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a)))
    }

    /// Embedding lookup: rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::dim("gather", t.shape(), &[0, 0]));
        }
        let vocab = t.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                size: vocab,
            });
        }
        let value = t.select_rows(ids)?;
        Ok(self.push(value, Op::Gather(table, ids.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start >= end || end > t.shape()[1] {
            return Err(Error::dim("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for row in t.iter_rows() {
            data.extend_from_slice(&row[start..end]);
        }
        let shape = vec![t.rows(), w];
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SliceCols(a, start, end),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis where `mask[i] == false` entries get
    /// probability exactly zero. The mask has one flag per element.
    /// A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return Err(Error::dim("masked_softmax", t.shape(), &[m.len()]));
            }
        }
        let n = t.last_dim();
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.iter_rows().enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) {
                    if !x.is_finite() {
                        return Err(Error::Numeric(format!("softmax input {x} at row {r}")));
                    }
                    mx = mx.max(x);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) {
                    o[j] = (x - mx).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// `gain ⊙ (x − μ) / sqrt(σ² + eps) + bias` over the last axis, with the
    /// population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if t.rank() == 0 || d < 2 {
            return Err(Error::Degenerate(format!(
                "layer_norm needs feature size >= 2, got {:?}",
                t.shape()
            )));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", t.shape(), g.shape()));
        }
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.outer_len());
        let mut out = Vec::with_capacity(t.len());
        for row in t.iter_rows() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut norms = Vec::with_capacity(t.outer_len());
        let mut out = Vec::with_capacity(t.len());
        for (r, row) in t.iter_rows().enumerate() {
            let norm = super::l2_norm(row);
            if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
                return Err(Error::Normalization(format!("row {r} has norm {norm}")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(value, Op::L2NormalizeRows(a, norms)))
    }

    /// Light recurrence over rows: `c_t = f_t ⊙ c_{t−1} + (1 − f_t) ⊙ x_t`,
    /// `c_0 = 0`. Returns all states `[T×d]`.
    pub fn sru_scan(&mut self, forget: Var, input: Var) -> Result<Var> {
        let (f, x) = (self.value(forget), self.value(input));
        if f.shape() != x.shape() || f.rank() != 2 {
            return Err(Error::dim("sru_scan", f.shape(), x.shape()));
        }
        let d = f.last_dim();
        let mut c = vec![0.0; f.len()];
        let mut prev = vec![0.0; d];
        for t in 0..f.rows() {
            let (fr, xr) = (f.row(t), x.row(t));
            for j in 0..d {
                prev[j] = fr[j] * prev[j] + (1.0 - fr[j]) * xr[j];
            }
            c[t * d..(t + 1) * d].copy_from_slice(&prev);
        }
        let value = Tensor::from_parts(f.shape().to_vec(), c);
        Ok(self.push(value, Op::SruScan(forget, input)))
    }

    /// Mean token cross-entropy of row-wise softmax(logits) against targets.
    /// `None` targets are masked and contribute nothing; if every target is
    /// masked the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let c = t.last_dim();
        let mut probs = Vec::with_capacity(t.len());
        let mut loss = 0.0;
        let mut count = 0;
        for (row, target) in t.iter_rows().zip(targets) {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
            if let Some(k) = *target {
                if k >= c {
                    return Err(Error::Contract(format!("target {k} >= {c} classes")));
                }
                loss += z.ln() - (row[k] - mx);
                count += 1;
            }
        }
        let value = Tensor::scalar(if count == 0 { 0.0 } else { loss / count as f64 });
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self
                    .leaf_grads
                    .entry(i)
                    .or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    accumulate(adj, *a, &matmul_raw(g, &bt, m, n, k));
                }
                if wants(b) {
                    let at = transpose_raw(ta.data(), m, k);
                    accumulate(adj, *b, &matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Binary(kind, a, b) => {
                let (da, db) = (val(a).data(), val(b).data());
                let (la, lb) = (da.len(), db.len());
                if wants(a) {
                    let mut ga = vec![0.0; la];
                    for (k, gv) in g.iter().enumerate() {
                        ga[k % la] += match kind {
                            Binary::Add | Binary::Sub => *gv,
                            Binary::Mul => gv * db[k % lb],
                        };
                    }
                    accumulate(adj, *a, &ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; lb];
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % lb] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * da[k % la],
                        };
                    }
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = val(a).data();
                let y = out.data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|k| {
                        g[k] * match kind {
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => x[k].signum() * f64::from(x[k] != 0.0),
                        }
                    })
                    .collect();
                accumulate(adj, *a, &ga);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(adj, *a, &ga);
            }
            Op::AddScalar(a) => accumulate(adj, *a, g),
            Op::Sum(a) => {
                let ga = vec![g[0]; val(a).len()];
                accumulate(adj, *a, &ga);
            }
            Op::Mean(a) => {
                let n = val(a).len();
                let ga = vec![g[0] / n as f64; n];
                accumulate(adj, *a, &ga);
            }
            Op::SumLast(a) => {
                let d = val(a).last_dim();
                let ga: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect();
                accumulate(adj, *a, &ga);
            }
            Op::MeanRows(a) => {
                let r = val(a).rows();
                let scaled: Vec<f64> = g.iter().map(|v| v / r as f64).collect();
                let ga: Vec<f64> = (0..r).flat_map(|_| scaled.iter().copied()).collect();
                accumulate(adj, *a, &ga);
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| val(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let outer = g.len() / total;
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if wants(p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(adj, *p, &gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        accumulate(adj, *p, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Transpose(a) => {
                // g has the output shape [c×r]
                let s = out.shape();
                accumulate(adj, *a, &transpose_raw(g, s[0], s[1]));
            }
            Op::Gather(table, ids) => {
                let t = val(table);
                let c = t.last_dim();
                let mut gt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
                accumulate(adj, *table, &gt);
            }
            Op::SliceCols(a, start, end) => {
                let t = val(a);
                let c = t.last_dim();
                let w = end - start;
                let mut ga = vec![0.0; t.len()];
                for r in 0..t.rows() {
                    ga[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(adj, *a, &ga);
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for r in 0..out.outer_len() {
                    let row = r * n..(r + 1) * n;
                    let s: f64 = y[row.clone()]
                        .iter()
                        .zip(&g[row.clone()])
                        .map(|(p, q)| p * q)
                        .sum();
                    for k in row {
                        ga[k] = y[k] * (g[k] - s);
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gd = val(gain).data();
                if wants(gain) {
                    let mut gg = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        gg[k % d] += gv * xhat[k];
                    }
                    accumulate(adj, *gain, &gg);
                }
                if wants(bias) {
                    let mut gb = vec![0.0; d];
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % d] += gv;
                    }
                    accumulate(adj, *bias, &gb);
                }
                if wants(x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let dxh: Vec<f64> = (0..d).map(|j| g[base + j] * gd[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh
                            .iter()
                            .zip(&xhat[base..base + d])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in 0..d {
                            gx[base + j] =
                                inv / d as f64 * (d as f64 * dxh[j] - s1 - xhat[base + j] * s2);
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = out.last_dim();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let row = r * n..(r + 1) * n;
                    let s: f64 = y[row.clone()]
                        .iter()
                        .zip(&g[row.clone()])
                        .map(|(p, q)| p * q)
                        .sum();
                    for k in row {
                        ga[k] = (g[k] - y[k] * s) / norm;
                    }
                }
                accumulate(adj, *a, &ga);
            }
            Op::SruScan(forget, input) => {
                let (f, x) = (val(forget), val(input));
                let c = out.data();
                let d = f.last_dim();
                let steps = f.rows();
                let mut gf = vec![0.0; f.len()];
                let mut gx = vec![0.0; f.len()];
                let mut carry = vec![0.0; d];
                for t in (0..steps).rev() {
                    for j in 0..d {
                        let k = t * d + j;
                        let gc = g[k] + carry[j];
                        let prev = if t == 0 { 0.0 } else { c[k - d] };
                        gf[k] = gc * (prev - x.data()[k]);
                        gx[k] = gc * (1.0 - f.data()[k]);
                        carry[j] = gc * f.data()[k];
                    }
                }
                if wants(forget) {
                    accumulate(adj, *forget, &gf);
                }
                if wants(input) {
                    accumulate(adj, *input, &gx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let c = val(logits).last_dim();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(k) = *target {
                        for j in 0..c {
                            gl[r * c + j] = probs[r * c + j] * scale;
                        }
                        gl[r * c + k] -= scale;
                    }
                }
                accumulate(adj, *logits, &gl);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(slot) => slot.iter_mut().zip(g).for_each(|(s, x)| *s += x),
        empty => *empty = Some(g.to_vec()),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y).data(), &[0.5, 0.5], 1e-15));

        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x).unwrap();
        assert!(close(g.value(y).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
        let x = g.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 5.0, 2.0], [0.0, 0.0, 0.0]]).unwrap());
        let y = g
            .masked_softmax(x, Some(vec![true, false, true, false, false, false]))
            .unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[4], 1.0));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(Tensor::vector(vec![1.0; 4]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-15).unwrap();
        assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-12));
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[1], 1.0));
        let zero = g.constant(Tensor::zeros(&[1]));
        let x = g.constant(Tensor::vector(vec![2.0]));
        assert!(matches!(
            g.layer_norm(x, one, zero, 1e-5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -3.0, 3.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::zeros(&[3, 2]));
        let row = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let col = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.add(m, row).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(g.add(m, col), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sum_is_all_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]), true);
        let unused = g.leaf(Tensor::vector(vec![1.0, 1.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad_or_zeros(unused), vec![0.0, 0.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_ignores_masked_targets() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::from_rows(&[[0.0, 0.0], [3.0, -1.0]]).unwrap(), true);
        let loss = g.cross_entropy(logits, &[Some(0), None]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert_eq!(&grad[2..], &[0.0, 0.0]);
    }

    #[test]
    fn sru_scan_recurrence() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[[0.5], [0.25]]).unwrap());
        let x = g.constant(Tensor::from_rows(&[[2.0], [4.0]]).unwrap());
        let c = g.sru_scan(f, x).unwrap();
        // c1 = 0.5*0 + 0.5*2 = 1; c2 = 0.25*1 + 0.75*4 = 3.25
        assert_eq!(g.value(c).data(), &[1.0, 3.25]);
    }
}
