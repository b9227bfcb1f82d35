//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed when a
//! node is added) and [`Graph::backward`] walks the tape once in reverse.
//! Nodes that cannot reach a parameter, and everything behind a
//! [`Graph::stop_grad`], never receive a gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{erf, exp, ln, sqrt};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a parameter tensor: which store it came from and its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub store: u8,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamSlot),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    BatchNorm { x: Var, affine: Option<(Var, Var)>, xhat: Matrix, inv_std: Vec<f64> },
    FrozenNorm { x: Var, affine: Option<(Var, Var)>, xhat: Matrix, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    LeftMul { lhs: Matrix, x: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    SoftTargetXent { logits: Var, targets: Vec<Vec<(usize, f64)>>, probs: Matrix, scale: f64 },
    Sum(Vec<Var>),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Batch statistics of a training-mode batch normalization node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "node is not a scalar");
        m.data[0]
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Parameter slots bound in this graph with their nodes.
    pub fn params(&self) -> impl Iterator<Item = (ParamSlot, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(slot) => Some((slot, Var(i))),
            _ => None,
        })
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, slot: ParamSlot, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Param(slot), requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let mut out = Matrix::zeros(self.value(a).rows, self.value(b).cols);
        gemm_acc(self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let mut out = Matrix::zeros(self.value(a).rows, self.value(b).rows);
        gemm_nt_acc(self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes differ");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, self.value(a).cols), "bias must be a 1 x cols row");
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols;
        let mut xhat = Matrix::zeros(xv.rows, n);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / sqrt(var + eps);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = xhat.clone();
        for r in 0..out.rows {
            for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    fn column_norm(&self, x: Var, affine: Option<(Var, Var)>, mean: &[f64], inv_std: &[f64]) -> (Matrix, Matrix) {
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            for (c, (o, v)) in xhat.row_mut(r).iter_mut().zip(xv.row(r)).enumerate() {
                *o = (v - mean[c]) * inv_std[c];
            }
        }
        let mut out = xhat.clone();
        if let Some((gamma, beta)) = affine {
            let g = &self.value(gamma).data;
            let b = &self.value(beta).data;
            for r in 0..out.rows {
                for ((o, gv), bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                    *o = *o * gv + bv;
                }
            }
        }
        (xhat, out)
    }

    /// Training-mode batch normalization over rows; `affine` is an optional
    /// `(gamma, beta)` pair. Returns the node and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut var {
            *s /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + eps)).collect();
        let (xhat, out) = self.column_norm(x, affine, &mean, &inv_std);
        let rg = self.rg(x) || affine.is_some_and(|(g, b)| self.rg(g) || self.rg(b));
        let node = self.push(out, Op::BatchNorm { x, affine, xhat, inv_std }, rg);
        (node, BatchStats { mean, var })
    }

    /// Column normalization with fixed statistics (evaluation mode).
    pub fn frozen_norm(&mut self, x: Var, affine: Option<(Var, Var)>, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + eps)).collect();
        let (xhat, out) = self.column_norm(x, affine, mean, &inv_std);
        let rg = self.rg(x) || affine.is_some_and(|(g, b)| self.rg(g) || self.rg(b));
        self.push(out, Op::FrozenNorm { x, affine, xhat, inv_std }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = 0.5 * *v * (1.0 + erf(*v * core::f64::consts::FRAC_1_SQRT_2));
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols, "column slice out of range");
        let mut out = Matrix::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row counts differ");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = self.value(x);
        assert!(start + count <= xv.rows, "row slice out of range");
        let out = Matrix::from_vec(count, xv.cols, xv.data[start * xv.cols..(start + count) * xv.cols].to_vec());
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows column counts differ");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts), rg)
    }

    /// `lhs * x` with a constant left factor (pooling and row selection).
    pub fn left_mul(&mut self, lhs: Matrix, x: Var) -> Var {
        let mut out = Matrix::zeros(lhs.rows, self.value(x).cols);
        gemm_acc(&lhs, self.value(x), &mut out);
        let rg = self.rg(x);
        self.push(out, Op::LeftMul { lhs, x }, rg)
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero; callers
    /// that need a direction check [`Graph::min_row_norm`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    pub fn min_row_norm(&self, x: Var) -> f64 {
        let m = self.value(x);
        (0..m.rows).map(|r| sqrt(m.row(r).iter().map(|v| v * v).sum::<f64>())).fold(f64::INFINITY, f64::min)
    }

    /// `-scale * sum_r sum_(j, w) w * log_softmax(logits[r])[j]`.
    ///
    /// Targets are validated by the caller.
    pub fn soft_target_xent(&mut self, logits: Var, targets: Vec<Vec<(usize, f64)>>, scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target list per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, row_targets) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for &(j, w) in row_targets {
                total -= w * (row[j] - lse);
            }
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = exp(v - lse);
            }
        }
        let rg = self.rg(logits);
        self.push(Matrix::from_vec(1, 1, vec![total * scale]), Op::SoftTargetXent { logits, targets, probs, scale }, rg)
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let mut total = 0.0;
        for p in &parts {
            total += self.scalar(*p);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Matrix::from_vec(1, 1, vec![total]), Op::Sum(parts), rg)
    }

    /// Identity in the forward pass; blocks every gradient.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// FNV-1a hash of the on/off pattern of every ReLU in the graph.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for v in &self.nodes[a.0].value.data {
                    h ^= (*v > 0.0) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Back-propagates from scalar `loss`, accumulating gradients on every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return;
        }
        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(before, node, g);
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + ln(row.iter().map(|v| exp(v - max)).sum::<f64>())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does
/// not need a gradient.
fn slot(nodes: &mut [Node], v: Var) -> Option<&mut Matrix> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let (r, c) = n.value.shape();
    Some(n.grad.get_or_insert_with(|| Matrix::zeros(r, c)))
}

fn norm_backward(xhat: &Matrix, inv_std: &[f64], dxhat: &Matrix, per_row: bool, dx: &mut Matrix) {
    let (rows, cols) = xhat.shape();
    if per_row {
        let n = cols as f64;
        for r in 0..rows {
            let xr = xhat.row(r);
            let dr = dxhat.row(r);
            let sum_d: f64 = dr.iter().sum();
            let sum_dx: f64 = dr.iter().zip(xr).map(|(a, b)| a * b).sum();
            for ((o, d), x) in dx.row_mut(r).iter_mut().zip(dr).zip(xr) {
                *o += inv_std[r] / n * (n * d - sum_d - x * sum_dx);
            }
        }
    } else {
        let n = rows as f64;
        let mut sum_d = vec![0.0; cols];
        let mut sum_dx = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = dxhat.get(r, c);
                sum_d[c] += d;
                sum_dx[c] += d * xhat.get(r, c);
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let d = dxhat.get(r, c);
                let v = inv_std[c] / n * (n * d - sum_d[c] - xhat.get(r, c) * sum_dx[c]);
                dx.data[r * cols + c] += v;
            }
        }
    }
}

/// Gradient of the affine part of a column norm: returns `d xhat` and
/// accumulates `d gamma`, `d beta`.
fn affine_backward(before: &mut [Node], affine: Option<(Var, Var)>, xhat: &Matrix, g: &Matrix) -> Matrix {
    match affine {
        None => g.clone(),
        Some((gamma, beta)) => {
            let gamma_v = before[gamma.0].value.data.clone();
            if let Some(db) = slot(before, beta) {
                db.add_assign(&col_sums(g));
            }
            if let Some(dg) = slot(before, gamma) {
                for r in 0..g.rows {
                    for ((o, a), b) in dg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += a * b;
                    }
                }
            }
            let mut d = g.clone();
            for r in 0..d.rows {
                for (o, gv) in d.row_mut(r).iter_mut().zip(&gamma_v) {
                    *o *= gv;
                }
            }
            d
        }
    }
}

fn propagate(before: &mut [Node], node: &Node, g: &Matrix) {
    match &node.op {
        Op::Constant | Op::Param(_) | Op::StopGrad => {}
        Op::MatMul(a, b) => {
            let bv = before[b.0].value.clone();
            if let Some(da) = slot(before, *a) {
                gemm_nt_acc(g, &bv, da);
            }
            let av = before[a.0].value.clone();
            if let Some(db) = slot(before, *b) {
                gemm_tn_acc(&av, g, db);
            }
        }
        Op::MatMulNt(a, b) => {
            let bv = before[b.0].value.clone();
            if let Some(da) = slot(before, *a) {
                gemm_acc(g, &bv, da);
            }
            let av = before[a.0].value.clone();
            if let Some(db) = slot(before, *b) {
                gemm_tn_acc(g, &av, db);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(before, *a) {
                da.add_assign(g);
            }
            if let Some(db) = slot(before, *b) {
                db.add_assign(g);
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(da) = slot(before, *a) {
                da.add_assign(g);
            }
            if let Some(db) = slot(before, *bias) {
                db.add_assign(&col_sums(g));
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(before, *a) {
                for (o, v) in da.data.iter_mut().zip(&g.data) {
                    *o += s * v;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gamma_v = before[gamma.0].value.data.clone();
            if let Some(db) = slot(before, *beta) {
                db.add_assign(&col_sums(g));
            }
            if let Some(dg) = slot(before, *gamma) {
                for r in 0..g.rows {
                    for ((o, a), b) in dg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                        *o += a * b;
                    }
                }
            }
            if let Some(dx) = slot(before, *x) {
                let mut dxhat = g.clone();
                for r in 0..dxhat.rows {
                    for (o, gv) in dxhat.row_mut(r).iter_mut().zip(&gamma_v) {
                        *o *= gv;
                    }
                }
                norm_backward(xhat, inv_std, &dxhat, true, dx);
            }
        }
        Op::BatchNorm { x, affine, xhat, inv_std } => {
            let dxhat = affine_backward(before, *affine, xhat, g);
            if let Some(dx) = slot(before, *x) {
                norm_backward(xhat, inv_std, &dxhat, false, dx);
            }
        }
        Op::FrozenNorm { x, affine, xhat, inv_std } => {
            let dxhat = affine_backward(before, *affine, xhat, g);
            if let Some(dx) = slot(before, *x) {
                let cols = dx.cols;
                for (i, (o, d)) in dx.data.iter_mut().zip(&dxhat.data).enumerate() {
                    *o += d * inv_std[i % cols];
                }
            }
        }
        Op::Relu(a) => {
            let av = before[a.0].value.data.clone();
            if let Some(da) = slot(before, *a) {
                for ((o, gv), x) in da.data.iter_mut().zip(&g.data).zip(&av) {
                    if *x > 0.0 {
                        *o += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = before[a.0].value.data.clone();
            if let Some(da) = slot(before, *a) {
                let inv_sqrt_2pi = 0.5 * core::f64::consts::FRAC_2_SQRT_PI * core::f64::consts::FRAC_1_SQRT_2;
                for ((o, gv), x) in da.data.iter_mut().zip(&g.data).zip(&av) {
                    let cdf = 0.5 * (1.0 + erf(x * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = inv_sqrt_2pi * exp(-0.5 * x * x);
                    *o += gv * (cdf + x * pdf);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            if let Some(da) = slot(before, *a) {
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(dx) = slot(before, *x) {
                for r in 0..g.rows {
                    for (o, v) in dx.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let width = before[p.0].value.cols;
                if let Some(dp) = slot(before, *p) {
                    for r in 0..g.rows {
                        for (o, v) in dp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + width]) {
                            *o += v;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(dx) = slot(before, *x) {
                let cols = g.cols;
                for (o, v) in dx.data[start * cols..(start + g.rows) * cols].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = before[p.0].value.len();
                if let Some(dp) = slot(before, *p) {
                    for (o, v) in dp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                        *o += v;
                    }
                }
                offset += len;
            }
        }
        Op::LeftMul { lhs, x } => {
            if let Some(dx) = slot(before, *x) {
                gemm_tn_acc(lhs, g, dx);
            }
        }
        Op::NormalizeRows { x, norms } => {
            let y = &node.value;
            if let Some(dx) = slot(before, *x) {
                for r in 0..y.rows {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += (gv - yv * dot) / norms[r];
                    }
                }
            }
        }
        Op::SoftTargetXent { logits, targets, probs, scale } => {
            let up = g.data[0] * scale;
            if let Some(dl) = slot(before, *logits) {
                for (r, row_targets) in targets.iter().enumerate() {
                    let mass: f64 = row_targets.iter().map(|t| t.1).sum();
                    for (o, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o += up * mass * p;
                    }
                    for &(j, w) in row_targets {
                        dl.data[r * probs.cols + j] -= up * w;
                    }
                }
            }
        }
        Op::Sum(parts) => {
            for p in parts {
                if let Some(dp) = slot(before, *p) {
                    dp.data[0] += g.data[0];
                }
            }
        }
    }
}
