use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::{gemm, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How `cross_entropy_masked` reduces over supervised positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    TokenMean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
        // per segment, heads × Ts × Ts, zero above the diagonal
        weights: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, so the
/// tape is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    /// Registers a borrowed tensor as a leaf.
    pub fn leaf(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor as a leaf.
    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a[i, j] + bias[j]`; the only broadcasting op.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.numel() != n || ta.shape().len() != 2 {
            return Err(mismatch("add_bias", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix(x, "layer_norm")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(mismatch("layer_norm", self.value(x), tg));
        }
        let tx = self.value(x);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Gathers rows of `table` (V×d) for `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix(table, "embedding")?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfVocab { id, vocab: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Multi-head causal attention over already-projected `q`, `k`, `v`
    /// (each T×d). Head `h` owns columns `h*d/heads..(h+1)*d/heads`. The
    /// per-head weights are kept on the node; see [`Graph::attention_weights`].
    pub fn causal_self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let t = self.matrix(q, "attention")?.0;
        self.packed_causal_attention(q, k, v, heads, &[t])
    }

    /// Causal attention over independent sequences stacked row-wise;
    /// `segments` lists their lengths. No position attends across a segment
    /// boundary.
    pub fn packed_causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (t, d) = self.matrix(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(mismatch("attention", self.value(q), self.value(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != t {
            return Err(TensorError::Invalid(format!(
                "segment lengths {segments:?} do not cover {t} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; segments.iter().map(|s| heads * s * s).sum()];
        let mut out = vec![0.0; t * d];
        let (mut base, mut wbase) = (0, 0);
        for &ts in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..ts {
                    let wrow = wbase + (h * ts + i) * ts;
                    let row = &mut weights[wrow..wrow + ts];
                    let gi = base + i;
                    let qi = &tq[gi * d + off..gi * d + off + dh];
                    for j in 0..=i {
                        let gj = base + j;
                        row[j] = scale * dot(qi, &tk[gj * d + off..gj * d + off + dh]);
                    }
                    softmax_in_place(&mut row[..=i]);
                    let oi = &mut out[gi * d + off..gi * d + off + dh];
                    for j in 0..=i {
                        let p = row[j];
                        let gj = base + j;
                        for (o, x) in oi.iter_mut().zip(&tv[gj * d + off..gj * d + off + dh]) {
                            *o += p * x;
                        }
                    }
                }
            }
            base += ts;
            wbase += heads * ts * ts;
        }
        let out = Tensor::new(vec![t, d], out)?;
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                weights,
            },
            &[q, k, v],
        )
    }

    /// Attention weights of an attention node as a `[heads, T, T]` tensor,
    /// for a single-segment node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor> {
        self.segment_attention_weights(v, 0)
    }

    /// `[heads, Ts, Ts]` weights of segment `seg` of an attention node.
    pub fn segment_attention_weights(&self, v: Var, seg: usize) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention {
                weights,
                heads,
                segments,
                ..
            } => {
                let ts = *segments.get(seg)?;
                let start: usize = segments[..seg].iter().map(|s| heads * s * s).sum();
                let len = heads * ts * ts;
                Tensor::new(vec![*heads, ts, ts], weights[start..start + len].to_vec()).ok()
            }
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, d) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != d {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.matrix(x, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::Invalid(format!(
                "row slice {start}..{} out of {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::new(vec![len, d], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    /// Negative log-likelihood of `targets` under row-softmax of `logits`,
    /// over the positions where `mask` is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        reduction: Reduction,
    ) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let w = match reduction {
            Reduction::Sum => 1.0,
            Reduction::TokenMean => 1.0 / count as f64,
        };
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.cross_entropy_weighted(logits, targets, &weights)
    }

    /// `sum_t weights[t] * -log softmax(logits[t])[targets[t]]`. Rows with zero
    /// weight are skipped entirely, so their targets are not validated.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (t, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != t || weights.len() != t {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {t} logit rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(TensorError::EmptyMask);
        }
        let tl = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for i in 0..t {
            if weights[i] == 0.0 {
                continue;
            }
            let y = targets[i];
            if y >= v {
                return Err(TensorError::IndexOutOfVocab { id: y, vocab: v });
            }
            let row = tl.row(i);
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            let lse = softmax_in_place(p);
            loss += weights[i] * (lse - row[y]);
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            shapes: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if let Some(s) = self.slot(grads, v) {
            for (a, b) in s.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    fn backward_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(s) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, tb.data(), true, s.data_mut(), 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, gd, false, s.data_mut(), 1.0);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd);
                self.accumulate(grads, *b, gd);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, gd);
                if let Some(s) = self.slot(grads, *bias) {
                    let n = s.numel();
                    for row in gd.chunks(n) {
                        for (x, y) in s.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = gd.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let s = gd[0];
                if let Some(slot) = self.slot(grads, *a) {
                    for x in slot.data_mut() {
                        *x += s;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dotp = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(grads, *beta) {
                    for row in gd.chunks(n) {
                        for (a, b) in s.data_mut().iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for (row, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s.data_mut()[j] += row[j] * hrow[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut d = vec![0.0; gd.len()];
                    let nf = n as f64;
                    for (i, (row, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let gh = row[j] * gam[j];
                            s1 += gh;
                            s2 += gh * hrow[j];
                        }
                        for j in 0..n {
                            let gh = row[j] * gam[j];
                            d[i * n + j] = rstd[i] / nf * (nf * gh - s1 - hrow[j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(s) = self.slot(grads, *table) {
                    let d = s.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut s.data_mut()[id * d..(id + 1) * d];
                        for (a, b) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dudx = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dudx)
                    })
                    .collect();
                self.accumulate(grads, *x, &d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                weights,
            } => {
                let (t, d) = (node.value.shape()[0], node.value.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk, tv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                let mut gv = vec![0.0; t * d];
                let mut ds = vec![0.0; segments.iter().copied().max().unwrap_or(0)];
                let (mut base, mut wbase) = (0, 0);
                for &ts in segments {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..ts {
                            let wrow = wbase + (h * ts + i) * ts;
                            let p = &weights[wrow..wrow + i + 1];
                            let gi_row = base + i;
                            let gi = &gd[gi_row * d + off..gi_row * d + off + dh];
                            let mut acc = 0.0;
                            for j in 0..=i {
                                let gj = base + j;
                                let dp = dot(gi, &tv[gj * d + off..gj * d + off + dh]);
                                ds[j] = dp;
                                acc += p[j] * dp;
                                for (a, b) in gv[gj * d + off..gj * d + off + dh].iter_mut().zip(gi) {
                                    *a += p[j] * b;
                                }
                            }
                            for j in 0..=i {
                                let s = scale * p[j] * (ds[j] - acc);
                                if s == 0.0 {
                                    continue;
                                }
                                let gj = base + j;
                                for c in 0..dh {
                                    gq[gi_row * d + off + c] += s * tk[gj * d + off + c];
                                    gk[gj * d + off + c] += s * tq[gi_row * d + off + c];
                                }
                            }
                        }
                    }
                    base += ts;
                    wbase += heads * ts * ts;
                }
                self.accumulate(grads, *q, &gq);
                self.accumulate(grads, *k, &gk);
                self.accumulate(grads, *v, &gv);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(s) = self.slot(grads, *x) {
                    let d = s.cols();
                    let dst = &mut s.data_mut()[start * d..start * d + gd.len()];
                    for (a, b) in dst.iter_mut().zip(gd) {
                        *a += b;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = gd[0];
                if let Some(slot) = self.slot(grads, *logits) {
                    let v = slot.cols();
                    let out = slot.data_mut();
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut out[i * v..(i + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *o += s * w * p;
                        }
                        row[targets[i]] -= s * w;
                    }
                }
            }
        }
    }
}

/// Gradients from one backward pass, keyed by graph node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reached from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes.get(v.0).map_or(&[][..], Vec::as_slice)),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the log-sum-exp of the original row.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
    max + z.ln()
}
