//! Tape-recorded reverse-mode differentiation.
//!
//! Every op appends a node whose inputs were created before it, so node order
//! is already a topological order and `backward` is a single reverse sweep.
//! Ops whose inputs carry no gradient are stored as constants and never
//! visited during backward.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive attention-mask entries at or below this value are treated as
/// hidden: the key is skipped and contributes an exact zero weight.
pub const MASK_HIDDEN_THRESHOLD: f64 = -1e8;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Map { input: Var, deriv: Vec<f64> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { input: Var, rows: Vec<usize> },
    RmsNorm { input: Var, gain: Var, inv_rms: Vec<f64> },
    Rotary { input: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
    Attention(Box<AttentionSaved>),
    CrossEntropyRows { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64> },
    KlRows { student: Var, rows: Vec<bool>, teacher_probs: Vec<f64>, student_probs: Vec<f64>, temperature: f64 },
}

#[derive(Clone, Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    mask: Arc<Vec<f64>>,
    probs: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A differentiation tape. Cheap to create; build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated by the last `backward`, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Number of recorded nodes that participate in differentiation.
    pub fn trainable_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Copies the value out with no link to this graph.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("scale");
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.last_dim();
        if vb.numel() != n || vb.rank() != 1 {
            return Err(Error::shape("add_row", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Applies `f` elementwise; `f` returns the value and its derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let vx = self.value(x);
        let (data, deriv): (Vec<f64>, Vec<f64>) = vx.data().iter().map(|&v| f(v)).unzip();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("map");
        self.push(out, Op::Map { input: x, deriv }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_with_derivative)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[..., k] x [k, n] -> [..., n]`. Leading dimensions of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() < 2 || vb.rank() != 2 || va.last_dim() != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.last_dim(), vb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut c, 0.0);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, c)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: va.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let src = va.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new([c, r], data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let conform = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !conform {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    // ---- neural primitives ------------------------------------------

    /// Softmax over the last dimension with the row maximum subtracted first.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let t = self.value(z);
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let d = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(z), &[z]))
    }

    /// Gathers rows `ids` of a `[vocab, dim]` table into `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: t.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id sequence"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new([ids.len(), dim], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Selects rows of `input` viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let (n, d) = (t.rows(), t.last_dim());
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "empty row selection"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    size: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new([rows.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows { input, rows: rows.to_vec() }, &[input]))
    }

    /// Root-mean-square normalisation of each last-dim row, then scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (t, g) = (self.value(x), self.value(gain));
        let d = t.last_dim();
        if g.rank() != 1 || g.numel() != d {
            return Err(Error::shape("rms_norm", t.shape(), g.shape()));
        }
        let mut inv_rms = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(g.data()).map(|(v, w)| v * r * w));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RmsNorm { input: x, gain, inv_rms }, &[x, gain]))
    }

    /// Rotary position embedding on `[batch, seq, heads, head_dim]`, rotating
    /// interleaved pairs by `pos * base^(-2i/head_dim)` with `pos` the seq index.
    pub fn rotary(&mut self, x: Var, base: f64) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rotary",
                shape: s.to_vec(),
                reason: "expected [batch, seq, heads, even head_dim]".into(),
            });
        }
        let (b, seq, h, dh) = (s[0], s[1], s[2], s[3]);
        let (cos, sin) = rotary_tables(seq, dh, base);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        let half = dh / 2;
        for bi in 0..b {
            for p in 0..seq {
                for hi in 0..h {
                    let off = ((bi * seq + p) * h + hi) * dh;
                    for i in 0..half {
                        let (c, sn) = (cos[p * half + i], sin[p * half + i]);
                        let (x0, x1) = (src[off + 2 * i], src[off + 2 * i + 1]);
                        data[off + 2 * i] = x0 * c - x1 * sn;
                        data[off + 2 * i + 1] = x0 * sn + x1 * c;
                    }
                }
            }
        }
        let out = Tensor::new(s.to_vec(), data)?;
        let op = Op::Rotary {
            input: x,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Scaled dot-product attention per head.
    ///
    /// `q` is `[batch, seq_q, heads, head_dim]`, `k`/`v` are
    /// `[batch, seq_k, heads, head_dim]` and `mask` holds additive entries laid
    /// out as `[batch, seq_q, seq_k]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, sk) = (tq.shape(), tk.shape());
        if sq.len() != 4 || sk.len() != 4 || tv.shape() != sk || sq[0] != sk[0] || sq[2..] != sk[2..] {
            return Err(Error::shape("attention", sq, sk));
        }
        let (b, nq, h, dh, nk) = (sq[0], sq[1], sq[2], sq[3], sk[1]);
        if mask.len() != b * nq * nk {
            return Err(Error::shape("attention", &[b, nq, nk], &[mask.len()]));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; qd.len()];
        let mut probs = vec![0.0; b * h * nq * nk];
        let mut scores = vec![0.0; nk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..nq {
                    let qo = ((bi * nq + i) * h + hi) * dh;
                    let mrow = &mask[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..nk {
                        if mrow[j] <= MASK_HIDDEN_THRESHOLD {
                            continue;
                        }
                        let ko = ((bi * nk + j) * h + hi) * dh;
                        let dot: f64 = (0..dh).map(|e| qd[qo + e] * kd[ko + e]).sum();
                        scores[j] = dot * scale + mrow[j];
                        max = max.max(scores[j]);
                    }
                    let prow = &mut probs[((bi * h + hi) * nq + i) * nk..((bi * h + hi) * nq + i + 1) * nk];
                    if max == f64::NEG_INFINITY {
                        // every key hidden: uniform, matching softmax of equal -inf surrogates
                        prow.fill(1.0 / nk as f64);
                    } else {
                        let mut total = 0.0;
                        for j in 0..nk {
                            if mrow[j] > MASK_HIDDEN_THRESHOLD {
                                prow[j] = (scores[j] - max).exp();
                                total += prow[j];
                            }
                        }
                        for p in prow.iter_mut() {
                            *p /= total;
                        }
                    }
                    for j in 0..nk {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vo = ((bi * nk + j) * h + hi) * dh;
                        for e in 0..dh {
                            out[qo + e] += p * vd[vo + e];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(sq.to_vec(), out)?;
        let saved = AttentionSaved { q, k, v, mask, probs };
        Ok(self.push(out, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Per-row cross entropy of `[N, V]` logits. `None` targets give an
    /// exact zero and no gradient. Returns a `[N]` tensor.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, vocab) = (t.rows(), t.last_dim());
        if t.rank() != 2 || targets.len() != n {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut losses = vec![0.0; n];
        let mut probs = vec![0.0; n * vocab];
        for (r, target) in targets.iter().enumerate() {
            let Some(label) = *target else { continue };
            if label >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: label,
                    size: vocab,
                });
            }
            let row = t.row(r);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "cross_entropy" });
            }
            let lse = log_sum_exp(row);
            losses[r] = lse - row[label];
            for (p, z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let out = Tensor::new([n], losses)?;
        let op = Op::CrossEntropyRows {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    /// Per-row `KL(softmax(teacher/T) || softmax(student/T))` computed in log
    /// space. The teacher is a plain tensor, so no gradient can reach it. Rows
    /// with `rows[r] == false` give an exact zero. Returns a `[N]` tensor.
    pub fn kl_rows(&mut self, teacher: &Tensor, student: Var, rows: &[bool], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid("kl_divergence", format!("temperature must be positive, got {temperature}")));
        }
        let s = self.value(student);
        if s.rank() != 2 || teacher.shape() != s.shape() || rows.len() != s.rows() {
            return Err(Error::shape("kl_divergence", teacher.shape(), s.shape()));
        }
        let (n, vocab) = (s.rows(), s.last_dim());
        let mut kl = vec![0.0; n];
        let mut tp = vec![0.0; n * vocab];
        let mut sp = vec![0.0; n * vocab];
        let mut lt = vec![0.0; vocab];
        let mut ls = vec![0.0; vocab];
        for r in 0..n {
            if !rows[r] {
                continue;
            }
            let (zt, zs) = (teacher.row(r), s.row(r));
            if zt.iter().chain(zs).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "kl_divergence" });
            }
            log_softmax_scaled(zt, temperature, &mut lt);
            log_softmax_scaled(zs, temperature, &mut ls);
            let mut acc = 0.0;
            for j in 0..vocab {
                let p = lt[j].exp();
                tp[r * vocab + j] = p;
                sp[r * vocab + j] = ls[j].exp();
                if p > 0.0 {
                    acc += p * (lt[j] - ls[j]);
                }
            }
            // guards against -0.0 / tiny negative rounding for identical rows
            kl[r] = acc.max(0.0);
        }
        let out = Tensor::new([n], kl)?;
        let op = Op::KlRows {
            student,
            rows: rows.to_vec(),
            teacher_probs: tp,
            student_probs: sp,
            temperature,
        };
        Ok(self.push(out, op, &[student]))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients from any previous call are
    /// discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let c: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(*a, &c);
                }
                if self.wants(*b) {
                    let c: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(*b, &c);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|g| g * c).collect();
                self.accumulate(*a, &d);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(*x, g);
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    self.accumulate(*bias, &gb);
                }
            }
            Op::Map { input, deriv } => {
                let d: Vec<f64> = g.iter().zip(deriv).map(|(g, d)| g * d).collect();
                self.accumulate(*input, &d);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.last_dim(), vb.shape()[1]);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), &mut da, 0.0);
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let va = self.value(*a);
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), &mut db, 0.0);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(a) => {
                let s = self.value(*a).shape();
                let (r, c) = (s[0], s[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(*a, &d);
            }
            Op::Reshape(a) => self.accumulate(*a, g),
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accumulate(v, &d);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.value(*input).shape().to_vec();
                let len = self.nodes[idx].value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let mut d = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(*input, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).numel()];
                self.accumulate(*a, &d);
            }
            Op::Softmax(z) => {
                let y = &self.nodes[idx].value;
                let dim = y.last_dim();
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(dim).zip(y.data().chunks(dim)).zip(g.chunks(dim)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..dim {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*z, &d);
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let dim = t.last_dim();
                let mut d = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        d[id * dim + j] += g[r * dim + j];
                    }
                }
                self.accumulate(*table, &d);
            }
            Op::GatherRows { input, rows } => {
                let t = self.value(*input);
                let dim = t.last_dim();
                let mut d = vec![0.0; t.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..dim {
                        d[src * dim + j] += g[r * dim + j];
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::RmsNorm { input, gain, inv_rms } => {
                let (x, w) = (self.value(*input), self.value(*gain));
                let dim = x.last_dim();
                let mut dx = vec![0.0; x.numel()];
                let mut dw = vec![0.0; dim];
                for (r, (xr, gr)) in x.data().chunks(dim).zip(g.chunks(dim)).enumerate() {
                    let rinv = inv_rms[r];
                    let dot: f64 = (0..dim).map(|j| gr[j] * w.data()[j] * xr[j]).sum();
                    let coef = rinv * rinv * rinv * dot / dim as f64;
                    for j in 0..dim {
                        dx[r * dim + j] = rinv * gr[j] * w.data()[j] - coef * xr[j];
                        dw[j] += gr[j] * xr[j] * rinv;
                    }
                }
                if self.wants(*input) {
                    self.accumulate(*input, &dx);
                }
                if self.wants(*gain) {
                    self.accumulate(*gain, &dw);
                }
            }
            Op::Rotary { input, cos, sin } => {
                let s = self.value(*input).shape().to_vec();
                let (b, seq, h, dh) = (s[0], s[1], s[2], s[3]);
                let half = dh / 2;
                let mut d = vec![0.0; g.len()];
                for bi in 0..b {
                    for p in 0..seq {
                        for hi in 0..h {
                            let off = ((bi * seq + p) * h + hi) * dh;
                            for i in 0..half {
                                let (c, sn) = (cos[p * half + i], sin[p * half + i]);
                                let (g0, g1) = (g[off + 2 * i], g[off + 2 * i + 1]);
                                d[off + 2 * i] = g0 * c + g1 * sn;
                                d[off + 2 * i + 1] = -g0 * sn + g1 * c;
                            }
                        }
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::Attention(saved) => self.attention_backward(saved, g),
            Op::CrossEntropyRows { logits, targets, probs } => {
                let vocab = self.value(*logits).last_dim();
                let mut d = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(label) = *target else { continue };
                    let gr = g[r];
                    for j in 0..vocab {
                        d[r * vocab + j] = gr * probs[r * vocab + j];
                    }
                    d[r * vocab + label] -= gr;
                }
                self.accumulate(*logits, &d);
            }
            Op::KlRows {
                student,
                rows,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let vocab = self.value(*student).last_dim();
                let mut d = vec![0.0; teacher_probs.len()];
                for (r, &active) in rows.iter().enumerate() {
                    if !active {
                        continue;
                    }
                    let c = g[r] / temperature;
                    for j in 0..vocab {
                        let k = r * vocab + j;
                        d[k] = c * (student_probs[k] - teacher_probs[k]);
                    }
                }
                self.accumulate(*student, &d);
            }
        }
    }

    fn attention_backward(&mut self, saved: &AttentionSaved, g: &[f64]) {
        let AttentionSaved { q, k, v, mask, probs } = saved;
        let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
        let (sq, sk) = (tq.shape(), tk.shape());
        let (b, nq, h, dh, nk) = (sq[0], sq[1], sq[2], sq[3], sk[1]);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; nk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..nq {
                    let qo = ((bi * nq + i) * h + hi) * dh;
                    let prow = &probs[((bi * h + hi) * nq + i) * nk..((bi * h + hi) * nq + i + 1) * nk];
                    let mrow = &mask[(bi * nq + i) * nk..(bi * nq + i + 1) * nk];
                    let gi = &g[qo..qo + dh];
                    let mut dot = 0.0;
                    for j in 0..nk {
                        let p = prow[j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vo = ((bi * nk + j) * h + hi) * dh;
                        let mut acc = 0.0;
                        for e in 0..dh {
                            dv[vo + e] += p * gi[e];
                            acc += gi[e] * vd[vo + e];
                        }
                        dp[j] = acc;
                        dot += p * acc;
                    }
                    for j in 0..nk {
                        let p = prow[j];
                        if p == 0.0 || mrow[j] <= MASK_HIDDEN_THRESHOLD {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let ko = ((bi * nk + j) * h + hi) * dh;
                        for e in 0..dh {
                            dq[qo + e] += ds * kd[ko + e];
                            dk[ko + e] += ds * qd[qo + e];
                        }
                    }
                }
            }
        }
        if self.wants(*q) {
            self.accumulate(*q, &dq);
        }
        if self.wants(*k) {
            self.accumulate(*k, &dk);
        }
        if self.wants(*v) {
            self.accumulate(*v, &dv);
        }
    }
}

/// `c = a · b + beta · c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: buffer lengths cover every index reachable through the strides
    // (checked above), and `c` does not alias `a` or `b`.
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

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax_scaled(z: &[f64], temperature: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(z) {
        *o = v / temperature;
    }
    let lse = log_sum_exp(out);
    for o in out.iter_mut() {
        *o -= lse;
    }
}

fn rotary_tables(seq: usize, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for p in 0..seq {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = p as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

pub fn gelu_with_derivative(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}
