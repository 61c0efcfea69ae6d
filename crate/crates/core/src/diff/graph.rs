use std::borrow::Cow;

use rand::Rng;

use super::ops::{self, AttnSaved};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Ln(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<(usize, usize)>,
        heads: usize,
        saved: AttnSaved,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order and never
/// removed; a graph is meant to be dropped after one backward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf; the tensor is not copied.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`d` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.cols();
        if bv.numel() != d {
            return Err(Error::Shape(format!(
                "bias of {} entries for rows of {d}",
                bv.numel()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push_op(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push_op(out, Op::Relu(x), &[x])
    }

    /// Elementwise natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("ln of a non-positive value".into()));
        }
        let out = xv.map(f64::ln);
        Ok(self.push_op(out, Op::Ln(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push_op(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, inv_std) = ops::layer_norm_fwd(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` (`[V, d]`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean label-smoothed cross-entropy over the rows of `logits`; scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_fwd(self.value(logits), targets, smoothing)?;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            &[logits],
        ))
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::mean_over_axis(self.value(x), axis)?;
        Ok(self.push_op(out, Op::MeanAxis { x, axis }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::SumAll(x), &[x])
    }

    /// Stacks matrices with equal column counts; empty inputs are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {} vs {cols} columns",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                t.rows()
            )));
        }
        let out = t.slice_rows(start, end);
        Ok(self.push_op(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Fused multi-head attention; query row `i` sees key rows in `spans[i]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (out, saved) =
            ops::attention_fwd(self.value(q), self.value(k), self.value(v), spans, heads)?;
        Ok(self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                saved,
            },
            &[q, k, v],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = {
            let xv = self.value(x);
            let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            Tensor::new(xv.shape().to_vec(), data).expect("same shape")
        };
        self.push_op(out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    let bt = ops::transpose(bv.data(), k, n);
                    ops::matmul_into(g, &bt, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += a_ip * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let d = gb.len();
                    for row in g.chunks(d.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += f * v;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += v / xi;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis).expect("axis");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = xv.cols();
                let rows = xv.rows();
                // normalised activations
                let mut xhat = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv_std[r];
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..d).map(|j| g[r * d + j] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[r * d..(r + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[r * d + j] +=
                                inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut target = smoothing / c as f64;
                            if j == t {
                                target += 1.0 - smoothing;
                            }
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape().to_vec();
                let (outer, len, inner) = ops::axis_split(&shape, *axis).expect("axis");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                saved,
            } => self.attention_backward(*q, *k, *v, spans, *heads, saved, g, grads),
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, v), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[(usize, usize)],
        heads: usize,
        saved: &AttnSaved,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nq = qv.rows();
        let nk = kv.rows();
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        for (i, &(s, e)) in spans.iter().enumerate() {
            let width = e - s;
            let mut off = saved.offsets[i];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                let p = &saved.probs[off..off + width];
                // dP_j = dO · V_j ; dS = P ⊙ (dP - <P, dP>)
                let dp: Vec<f64> = (s..e)
                    .map(|j| ops::dot(go, &vv.row(j)[cols.clone()]))
                    .collect();
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (jj, j) in (s..e).enumerate() {
                    let ds = p[jj] * (dp[jj] - dot) * scale;
                    let krow = &kv.row(j)[cols.clone()];
                    let qrow = &qv.row(i)[cols.clone()];
                    for c in 0..dh {
                        dq[i * d + h * dh + c] += ds * krow[c];
                        dk[j * d + h * dh + c] += ds * qrow[c];
                        dv[j * d + h * dh + c] += p[jj] * go[c];
                    }
                }
                off += width;
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                add_into(gv, &delta);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
