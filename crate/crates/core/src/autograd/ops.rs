use std::ops::Range;

use super::kernels::{self, gemm};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of a fused multi-head self-attention call: `n_seq` sequences of
/// `seq_len` rows each, model width split evenly across `n_heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub causal: bool,
}

pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: Var,
        rows: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    Grl(Var, f64),
    Pearson {
        x: Var,
        y: Var,
        // Per column: centered x, centered y, |x|, |y|, r (zero norms mark degeneracy).
        cx: Vec<f64>,
        cy: Vec<f64>,
        nx: Vec<f64>,
        ny: Vec<f64>,
        r: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

fn is_flat(sum_sq: f64, peak: f64, n: usize) -> bool {
    sum_sq == 0.0 || (sum_sq / n as f64).sqrt() <= 1e-13 * peak
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::contract(format!("{op}: {detail}"))
}

impl Graph {
    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_requires_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix_dims();
        let b = self.value(bias);
        if b.numel() != cols {
            return Err(shape_err("add_row", format!("bias {:?} vs {cols} columns", b.shape())));
        }
        let b = b.data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(&b).map(|(v, c)| v + c))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        self.record(out, Op::Scale(x, factor), &[x])
    }

    /// `a (.., k) x b (k, n)`; leading axes of `a` fold into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (m, k) = va.as_matrix_dims();
        if vb.shape().len() != 2 || vb.shape()[0] != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let n = vb.shape()[1];
        let data = kernels::matmul(va.data(), vb.data(), m, k, n);
        let shape = match va.shape() {
            [lead @ .., _] if !lead.is_empty() => [lead, &[n]].concat(),
            _ => vec![m, n],
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        self.record(out, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (_, cols) = vx.as_matrix_dims();
        let mut data = vx.data().to_vec();
        data.chunks_mut(cols).for_each(kernels::softmax_in_place);
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        self.record(out, Op::Softmax(x), &[x])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.as_matrix_dims();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err("layer_norm", format!("gain/bias must have {cols} entries")));
        }
        let mut normalized = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for (r, row) in vx.data().chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for (c, v) in row.iter().enumerate() {
                normalized[r * cols + c] = (v - mean) * inv;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = normalized
            .chunks(cols)
            .flat_map(|row| row.iter().enumerate().map(|(c, v)| v * g[c] + b[c]))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.record(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, rows: Vec<Option<usize>>) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(shape_err("gather_rows", format!("table must be 2-D, got {:?}", vt.shape())));
        }
        let (n, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = vec![0.0; rows.len() * d];
        for (i, row) in rows.iter().enumerate() {
            if let Some(r) = *row {
                if r >= n {
                    return Err(shape_err("gather_rows", format!("row {r} out of range for {n} rows")));
                }
                data[i * d..(i + 1) * d].copy_from_slice(&vt.data()[r * d..(r + 1) * d]);
            }
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.record(out, Op::GatherRows { table, rows }, &[table]))
    }

    /// Embedding lookup: one row of `table` per token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    /// Mean cross-entropy of `logits (m x V)` against the rows whose target is
    /// `Some`. Rows with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, classes) = vl.as_matrix_dims();
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let active = targets.iter().filter(|t| t.is_some()).count();
        if active == 0 {
            return Err(shape_err("cross_entropy", "no target positions".into()));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            if let Some(t) = targets[r] {
                if t >= classes {
                    return Err(shape_err("cross_entropy", format!("target {t} >= {classes} classes")));
                }
                loss += kernels::log_sum_exp(row) - row[t];
            }
            kernels::softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / active as f64);
        Ok(self.record(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::scalar(vx.data().iter().sum::<f64>() / vx.numel() as f64);
        self.record(out, Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(out, Op::Sum(x), &[x])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(parts[0]).as_matrix_dims().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix_dims();
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for (r, src) in self.value(p).data().chunks(w).enumerate() {
                data[r * total + offset..r * total + offset + w].copy_from_slice(src);
            }
            offset += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gradient reversal: identity forward, `-lambda * upstream` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("gradient reversal lambda must be positive, got {lambda}")));
        }
        let out = self.value(x).clone();
        Ok(self.record(out, Op::Grl(x, lambda), &[x]))
    }

    /// Sample Pearson correlation of two equal-length vectors, as a scalar.
    pub fn pearson(&mut self, x: Var, y: Var) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        if vx.shape().len() != 1 || vx.shape() != vy.shape() {
            return Err(shape_err("pearson", format!("vectors required, got {:?} and {:?}", vx.shape(), vy.shape())));
        }
        self.pearson_impl(x, y, true)
    }

    /// Column-wise Pearson correlation of two `n x c` matrices, as a length-`c` vector.
    pub fn pearson_cols(&mut self, x: Var, y: Var) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        if vx.shape().len() != 2 || vx.shape() != vy.shape() {
            return Err(shape_err("pearson_cols", format!("{:?} vs {:?}", vx.shape(), vy.shape())));
        }
        self.pearson_impl(x, y, false)
    }

    fn pearson_impl(&mut self, x: Var, y: Var, scalar: bool) -> Result<Var> {
        let (n, cols) = self.value(x).as_matrix_dims();
        if n < 2 {
            return Err(shape_err("pearson", format!("need at least 2 samples, got {n}")));
        }
        let mut cx = self.value(x).data().to_vec();
        let mut cy = self.value(y).data().to_vec();
        let mut nx = vec![0.0; cols];
        let mut ny = vec![0.0; cols];
        let mut r = vec![0.0; cols];
        let mut degenerate = 0;
        for c in 0..cols {
            let mx = (0..n).map(|i| cx[i * cols + c]).sum::<f64>() / n as f64;
            let my = (0..n).map(|i| cy[i * cols + c]).sum::<f64>() / n as f64;
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            let (mut peak_x, mut peak_y) = (0.0f64, 0.0f64);
            for i in 0..n {
                peak_x = peak_x.max(cx[i * cols + c].abs());
                peak_y = peak_y.max(cy[i * cols + c].abs());
                let a = cx[i * cols + c] - mx;
                let b = cy[i * cols + c] - my;
                cx[i * cols + c] = a;
                cy[i * cols + c] = b;
                sxx += a * a;
                syy += b * b;
                sxy += a * b;
            }
            // A constant column leaves rounding residue after centering.
            if is_flat(sxx, peak_x, n) || is_flat(syy, peak_y, n) {
                degenerate += 1;
                continue;
            }
            nx[c] = sxx.sqrt();
            ny[c] = syy.sqrt();
            r[c] = (sxy / (nx[c] * ny[c])).clamp(-1.0, 1.0);
        }
        self.degenerate_correlations += degenerate;
        let out = if scalar {
            Tensor::scalar(r[0])
        } else {
            Tensor::vector(r.clone())
        };
        Ok(self.record(out, Op::Pearson { x, y, cx, cy, nx, ny, r }, &[x, y]))
    }

    /// Averages contiguous row ranges of a matrix into one row each.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.as_matrix_dims();
        let mut data = vec![0.0; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > rows {
                return Err(shape_err("segment_mean", format!("segment {s} ({seg:?}) is empty or exceeds {rows} rows")));
            }
            let inv = 1.0 / seg.len() as f64;
            for r in seg.clone() {
                for c in 0..cols {
                    data[s * cols + c] += vx.data()[r * cols + c] * inv;
                }
            }
        }
        let out = Tensor::new(vec![segments.len(), cols], data)?;
        Ok(self.record(out, Op::SegmentMean { x, segments }, &[x]))
    }

    /// Fused scaled dot-product self-attention over `(n_seq * seq_len) x d`
    /// query/key/value matrices. Heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (rows, d) = self.value(q).as_matrix_dims();
        for other in [k, v] {
            if self.value(other).as_matrix_dims() != (rows, d) {
                return Err(shape_err("attention", "q, k, v shapes differ".into()));
            }
        }
        if rows != spec.n_seq * spec.seq_len || spec.n_heads == 0 || d % spec.n_heads != 0 {
            return Err(shape_err("attention", format!("{rows}x{d} incompatible with {spec:?}")));
        }
        let t = spec.seq_len;
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; spec.n_seq * spec.n_heads * t * t];
        let mut out = vec![0.0; rows * d];
        for s in 0..spec.n_seq {
            for h in 0..spec.n_heads {
                let p = &mut probs[(s * spec.n_heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let qi = &qd[(s * t + i) * d + h * dh..][..dh];
                    let limit = if spec.causal { i + 1 } else { t };
                    for j in 0..t {
                        p[i * t + j] = if j < limit {
                            let kj = &kd[(s * t + j) * d + h * dh..][..dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    kernels::softmax_in_place(&mut p[i * t..(i + 1) * t]);
                    let o = &mut out[(s * t + i) * d + h * dh..][..dh];
                    for j in 0..limit {
                        let w = p[i * t + j];
                        let vj = &vd[(s * t + j) * d + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += w * b);
                    }
                }
            }
        }
        let shape = self.value(q).shape().to_vec();
        let out = Tensor::new(shape, out)?;
        Ok(self.record(out, Op::Attention { q, k, v, spec, probs }, &[q, k, v]))
    }

    /// Gradient contributions of node `id` to its inputs given its upstream gradient.
    pub(super) fn input_grads(&self, id: usize, grad: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, grad.to_vec()), (*b, grad.to_vec())],
            Op::AddRow { x, bias } => {
                let cols = self.value(*bias).numel();
                let mut gb = vec![0.0; cols];
                for row in grad.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                vec![(*x, grad.to_vec()), (*bias, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = grad.iter().zip(vb).map(|(g, y)| g * y).collect();
                let gb = grad.iter().zip(va).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, f) => vec![(*x, grad.iter().map(|g| g * f).collect())],
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).as_matrix_dims();
                let n = self.value(*b).shape()[1];
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, grad, false, self.value(*b).data(), true, &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, grad, false, &mut gb, 0.0);
                    out.push((*b, gb));
                }
                out
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                vec![(*x, grad.iter().zip(vx).map(|(g, &v)| g * kernels::gelu_grad(v)).collect())]
            }
            Op::Softmax(x) => {
                let (_, cols) = node.value.as_matrix_dims();
                let mut gx = vec![0.0; grad.len()];
                for ((p, g), o) in node.value.data().chunks(cols).zip(grad.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        o[c] = p[c] * (g[c] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let cols = self.value(*gamma).numel();
                let g = self.value(*gamma).data();
                let mut gx = vec![0.0; grad.len()];
                let mut gg = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for (r, (gr, xh)) in grad.chunks(cols).zip(normalized.chunks(cols)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        gg[c] += gr[c] * xh[c];
                        gbeta[c] += gr[c];
                        let d = gr[c] * g[c];
                        mean_d += d;
                        mean_dx += d * xh[c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let d = gr[c] * g[c];
                        gx[r * cols + c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::GatherRows { table, rows } => {
                let vt = self.value(*table);
                let d = vt.shape()[1];
                let mut gt = vec![0.0; vt.numel()];
                for (i, row) in rows.iter().enumerate() {
                    if let Some(r) = *row {
                        gt[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&grad[i * d..(i + 1) * d])
                            .for_each(|(a, g)| *a += g);
                    }
                }
                vec![(*table, gt)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (_, classes) = self.value(*logits).as_matrix_dims();
                let active = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = grad[0] / active;
                let mut gl = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        row.copy_from_slice(&probs[r * classes..(r + 1) * classes]);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                vec![(*logits, gl)]
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![grad[0] / n as f64; n])]
            }
            Op::Sum(x) => vec![(*x, vec![grad[0]; self.value(*x).numel()])],
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.as_matrix_dims();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).as_matrix_dims().1;
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w].copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, gp));
                }
                out
            }
            Op::Grl(x, lambda) => vec![(*x, grad.iter().map(|g| -lambda * g).collect())],
            Op::Pearson { x, y, cx, cy, nx, ny, r } => {
                let cols = r.len();
                let n = cx.len() / cols;
                let mut gx = vec![0.0; cx.len()];
                let mut gy = vec![0.0; cy.len()];
                for c in 0..cols {
                    if nx[c] == 0.0 || ny[c] == 0.0 {
                        continue;
                    }
                    let g = grad[c];
                    let denom = nx[c] * ny[c];
                    for i in 0..n {
                        let a = cx[i * cols + c];
                        let b = cy[i * cols + c];
                        gx[i * cols + c] = g * (b / denom - r[c] * a / (nx[c] * nx[c]));
                        gy[i * cols + c] = g * (a / denom - r[c] * b / (ny[c] * ny[c]));
                    }
                }
                vec![(*x, gx), (*y, gy)]
            }
            Op::SegmentMean { x, segments } => {
                let (_, cols) = self.value(*x).as_matrix_dims();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    for r in seg.clone() {
                        for c in 0..cols {
                            gx[r * cols + c] += grad[s * cols + c] * inv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Attention { q, k, v, spec, probs } => self.attention_grads(*q, *k, *v, *spec, probs, grad),
        }
    }

    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: &[f64],
        grad: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (_, d) = self.value(q).as_matrix_dims();
        let t = spec.seq_len;
        let dh = d / spec.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; t];
        for s in 0..spec.n_seq {
            for h in 0..spec.n_heads {
                let p = &probs[(s * spec.n_heads + h) * t * t..][..t * t];
                for i in 0..t {
                    let go = &grad[(s * t + i) * d + h * dh..][..dh];
                    let limit = if spec.causal { i + 1 } else { t };
                    let mut dot = 0.0;
                    for j in 0..limit {
                        let row_v = (s * t + j) * d + h * dh;
                        let w = p[i * t + j];
                        for c in 0..dh {
                            gv[row_v + c] += w * go[c];
                        }
                        dp[j] = go.iter().zip(&vd[row_v..row_v + dh]).map(|(a, b)| a * b).sum();
                        dot += w * dp[j];
                    }
                    let row_q = (s * t + i) * d + h * dh;
                    for j in 0..limit {
                        let ds = p[i * t + j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let row_k = (s * t + j) * d + h * dh;
                        for c in 0..dh {
                            gq[row_q + c] += ds * kd[row_k + c];
                            gk[row_k + c] += ds * qd[row_q + c];
                        }
                    }
                }
            }
        }
        vec![(q, gq), (k, gk), (v, gv)]
    }
}
