//! Forward kernels shared by the tape and by callers that only need values.

use super::Tensor;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix(a, "matmul")?;
    let (k2, n) = require_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `r x c` matrix.
pub(crate) fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Dot product with independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Row-wise layer normalisation. Returns the output and the per-row
/// `1/sqrt(var + eps)` factors needed for the backward pass.
pub(crate) fn layer_norm_fwd(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape(format!(
            "layer_norm gain/bias must have {d} entries, got {} and {}",
            gain.numel(),
            bias.numel()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(s);
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (row[j] - mean) * s * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv_std))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_fwd(x, gain, bias).map(|(t, _)| t)
}

/// Mean over `axis`, removing that axis.
pub fn mean_over_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    if len == 0 {
        return Err(Error::Contract("mean over an empty axis".into()));
    }
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x.data()[(o * len + j) * inner + i];
            }
        }
    }
    for v in &mut out {
        *v /= len as f64;
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Label-smoothed cross-entropy averaged over rows.
///
/// Target distribution per row is `(1 - smoothing)` on the target class plus
/// `smoothing / C` spread uniformly. Also returns the row softmax values.
pub(crate) fn cross_entropy_fwd(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    let c = logits.cols();
    let rows = logits.rows();
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "cross_entropy: {} targets for {rows} rows",
            targets.len()
        )));
    }
    let mut probs = Vec::with_capacity(logits.numel());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Index { index: t, size: c });
        }
        let lsm = log_softmax_row(logits.row(r));
        let nll = -lsm[t];
        let smooth = -lsm.iter().sum::<f64>() / c as f64;
        total += (1.0 - smoothing) * nll + smoothing * smooth;
        probs.extend(lsm.iter().map(|v| v.exp()));
    }
    Ok((total / rows as f64, probs))
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize], smoothing: f64) -> Result<f64> {
    cross_entropy_fwd(logits, targets, smoothing).map(|(l, _)| l)
}

/// Saved state of the fused attention kernel.
#[derive(Debug, Clone)]
pub(crate) struct AttnSaved {
    /// Attention weights, laid out row-major per (query, head) over its span.
    pub probs: Vec<f64>,
    /// Offset into `probs` for each query row.
    pub offsets: Vec<usize>,
}

/// Multi-head scaled dot-product attention where query row `i` attends to
/// key rows `spans[i].0..spans[i].1`.
pub(crate) fn attention_fwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spans: &[(usize, usize)],
    heads: usize,
) -> Result<(Tensor, AttnSaved)> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("{d} columns not divisible into {heads} heads")));
    }
    if spans.len() != q.rows() {
        return Err(Error::Shape(format!(
            "attention: {} spans for {} queries",
            spans.len(),
            q.rows()
        )));
    }
    let nk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows() * d];
    let mut probs = Vec::new();
    let mut offsets = Vec::with_capacity(q.rows());
    for (i, &(s, e)) in spans.iter().enumerate() {
        if s >= e || e > nk {
            return Err(Error::Shape(format!(
                "attention span {s}..{e} invalid for {nk} keys"
            )));
        }
        offsets.push(probs.len());
        let qrow = q.row(i);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &qrow[cols.clone()];
            let base = probs.len();
            let mut max = f64::NEG_INFINITY;
            for j in s..e {
                let kh = &k.row(j)[cols.clone()];
                let score = dot(qh, kh) * scale;
                max = max.max(score);
                probs.push(score);
            }
            let mut total = 0.0;
            for p in &mut probs[base..] {
                *p = (*p - max).exp();
                total += *p;
            }
            let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (jj, p) in probs[base..].iter_mut().enumerate() {
                *p /= total;
                let vh = &v.row(s + jj)[cols.clone()];
                for (o, &vv) in orow.iter_mut().zip(vh) {
                    *o += *p * vv;
                }
            }
        }
    }
    Ok((Tensor::new(vec![q.rows(), d], out)?, AttnSaved { probs, offsets }))
}
