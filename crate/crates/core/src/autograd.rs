//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every forward op appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the parameter
//! slots that were registered with [`Graph::param`]. The same tape is used for
//! inference, where `backward` is simply never called.

use crate::tensor::{gemm, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Large negative score given to masked attention positions.
pub const MASKED_SCORE: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    AddRow(Var, Var),
    /// Multiplies every row of an `m x n` matrix by a `1 x n` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Dropout(Var, Vec<f64>),
    WeightedSum(Vec<(Var, f64)>),
    Mse(Var, Var),
    MseConst(Var, Matrix),
    CrossEntropy(Var, Vec<usize>, Matrix),
    BceLogits(Var, Matrix),
    MaskedMse(Var, Vec<f64>, Vec<bool>),
    SmoothClamp(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant: gradients are not tracked past it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// A trainable leaf whose gradient lands in slot `index` on backward.
    /// Binding the same slot twice returns the existing node.
    pub fn param(&mut self, index: usize, value: &Matrix) -> Var {
        if let Some(Some(v)) = self.bound.get(index) {
            return *v;
        }
        let v = self.push(value.clone(), Op::Param(index));
        if self.bound.len() <= index {
            self.bound.resize(index + 1, None);
        }
        self.bound[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = Matrix::zeros(m, n);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt {m}x{k} by ({n}x{k2})ᵀ");
        let mut out = Matrix::zeros(m, n);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1x{n} row");
        let mut out = self.value(a).clone();
        let r = self.value(row).as_slice();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "mul_row expects a 1x{n} row");
        let mut out = self.value(a).clone();
        let r = self.value(row).as_slice();
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row-wise softmax. Entries where `allowed` is false receive
    /// [`MASKED_SCORE`] before normalization.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Var {
        let mut out = self.value(a).clone();
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), out.len(), "attention mask shape mismatch");
            for (v, &ok) in out.as_mut_slice().iter_mut().zip(mask) {
                if !ok {
                    *v = MASKED_SCORE;
                }
            }
        }
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise standardization (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = self.value(a);
        assert!(start + width <= src.cols(), "slice_cols out of bounds");
        let mut out = Matrix::zeros(src.rows(), width);
        for r in 0..src.rows() {
            out.row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
            }
            offset += src.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Inverted dropout with a caller-provided keep mask (1 keep, 0 drop).
    pub fn dropout(&mut self, a: Var, keep: &[bool], p: f64) -> Var {
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out = Matrix::from_vec(
            self.shape(a).0,
            self.shape(a).1,
            self.value(a)
                .as_slice()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        )
        .expect("dropout mask shape");
        self.push(out, Op::Dropout(a, mask))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Mean squared difference of two nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let n = va.len().max(1) as f64;
        let loss = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Matrix::scalar(loss), Op::Mse(a, b))
    }

    pub fn mse_const(&mut self, a: Var, target: &Matrix) -> Var {
        assert_eq!(self.shape(a), target.shape(), "mse_const shape mismatch");
        let va = self.value(a);
        let n = va.len().max(1) as f64;
        let loss = va
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Matrix::scalar(loss), Op::MseConst(a, target.clone()))
    }

    /// Mean over rows of the softmax cross-entropy against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rows(), targets.len(), "cross_entropy target count");
        let mut probs = v.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = loss / targets.len().max(1) as f64;
        self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        )
    }

    /// Mean binary cross-entropy with logits over every entry.
    pub fn bce_logits(&mut self, logits: Var, targets: &Matrix) -> Var {
        let v = self.value(logits);
        assert_eq!(v.shape(), targets.shape(), "bce target shape");
        let n = v.len().max(1) as f64;
        let loss = v
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push(Matrix::scalar(loss), Op::BceLogits(logits, targets.clone()))
    }

    /// Mean squared error over the entries selected by `mask`; 0 if none are.
    pub fn masked_mse(&mut self, a: Var, target: &[f64], mask: &[bool]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), target.len(), "masked_mse target length");
        assert_eq!(v.len(), mask.len(), "masked_mse mask length");
        let count = mask.iter().filter(|&&m| m).count();
        let loss = if count == 0 {
            0.0
        } else {
            v.as_slice()
                .iter()
                .zip(target)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((x, t), _)| (x - t) * (x - t))
                .sum::<f64>()
                / count as f64
        };
        self.push(
            Matrix::scalar(loss),
            Op::MaskedMse(a, target.to_vec(), mask.to_vec()),
        )
    }

    /// Mean over adjacent row pairs and columns of `min(Δ², τ²)`.
    pub fn smooth_clamp(&mut self, a: Var, tau: f64) -> Var {
        let v = self.value(a);
        let loss = smooth_clamp_value(v, tau);
        self.push(Matrix::scalar(loss), Op::SmoothClamp(a, tau))
    }

    /// Back-propagates from the scalar node `loss`, adding parameter gradients
    /// into `param_grads` (indexed by the slot passed to [`Graph::param`]).
    pub fn backward(&self, loss: Var, param_grads: &mut [Matrix]) {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => param_grads[*slot].axpy(1.0, &g),
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut ga, 0.0);
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, false, &mut ga, 0.0);
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    gemm(&g, true, va, false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let va = self.value(*a);
                    let vr = self.value(*row).as_slice();
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let gin = g.row(r);
                        let xin = va.row(r);
                        for c in 0..g.cols() {
                            gr.as_mut_slice()[c] += gin[c] * xin[c];
                        }
                        for (o, &w) in ga.row_mut(r).iter_mut().zip(vr) {
                            *o *= w;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, k) => {
                    let mut ga = g;
                    ga.scale_in_place(*k);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (&p, &q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for ((o, &ly), &q) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = q - ly.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, &gy), &yy) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = inv_std[r] * (gy - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Dropout(a, mask) => {
                    let (rows, cols) = g.shape();
                    let ga = Matrix::from_vec(
                        rows,
                        cols,
                        g.as_slice().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    )
                    .expect("dropout grad shape");
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Matrix::scalar(gv * w));
                    }
                }
                Op::Mse(a, b) => {
                    let gv = g.item();
                    let va = self.value(*a);
                    let n = va.len().max(1) as f64;
                    let ga = va.zip_map(self.value(*b), |x, y| 2.0 * gv * (x - y) / n);
                    accumulate(&mut grads, *b, ga.map(|x| -x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::MseConst(a, target) => {
                    let gv = g.item();
                    let va = self.value(*a);
                    let n = va.len().max(1) as f64;
                    let ga = va.zip_map(target, |x, y| 2.0 * gv * (x - y) / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let gv = g.item() / targets.len().max(1) as f64;
                    let mut ga = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        ga.row_mut(r)[t] -= 1.0;
                    }
                    ga.scale_in_place(gv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::BceLogits(a, targets) => {
                    let va = self.value(*a);
                    let gv = g.item() / va.len().max(1) as f64;
                    let ga = va.zip_map(targets, |x, t| gv * (sigmoid(x) - t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedMse(a, target, mask) => {
                    let va = self.value(*a);
                    let count = mask.iter().filter(|&&m| m).count();
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    if count > 0 {
                        let gv = g.item() / count as f64;
                        for (i, o) in ga.as_mut_slice().iter_mut().enumerate() {
                            if mask[i] {
                                *o = 2.0 * gv * (va.as_slice()[i] - target[i]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SmoothClamp(a, tau) => {
                    let va = self.value(*a);
                    let (rows, cols) = va.shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    if rows > 1 {
                        let gv = g.item() / ((rows - 1) * cols) as f64;
                        let cap = tau * tau;
                        for r in 1..rows {
                            for c in 0..cols {
                                let d = va.get(r, c) - va.get(r - 1, c);
                                if d * d < cap {
                                    let dd = 2.0 * gv * d;
                                    ga.as_mut_slice()[r * cols + c] += dd;
                                    ga.as_mut_slice()[(r - 1) * cols + c] -= dd;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn smooth_clamp_value(v: &Matrix, tau: f64) -> f64 {
    let (rows, cols) = v.shape();
    if rows < 2 || cols == 0 {
        return 0.0;
    }
    let cap = tau * tau;
    let mut acc = 0.0;
    for r in 1..rows {
        for c in 0..cols {
            let d = v.get(r, c) - v.get(r - 1, c);
            acc += (d * d).min(cap);
        }
    }
    acc / ((rows - 1) * cols) as f64
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in xs.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to every entry of the
    /// single parameter, compared against the tape's gradient.
    fn check(param: Matrix, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(0, &param);
        let loss = f(&mut g, p);
        let mut grads = vec![Matrix::zeros(param.rows(), param.cols())];
        g.backward(loss, &mut grads);

        let h = 1e-5;
        for i in 0..param.len() {
            let eval = |delta: f64| {
                let mut q = param.clone();
                q.as_mut_slice()[i] += delta;
                let mut g = Graph::new();
                let p = g.param(0, &q);
                let l = f(&mut g, p);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[0].as_slice()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "entry {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * seed).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn gradients_of_linear_algebra_ops() {
        let b = sample(4, 3, 0.7);
        check(sample(2, 4, 1.3), |g, p| {
            let bb = g.input(b.clone());
            let y = g.matmul(p, bb);
            let t = Matrix::filled(2, 3, 0.1);
            g.mse_const(y, &t)
        });
        check(sample(2, 4, 0.3), |g, p| {
            let other = g.input(sample(3, 4, 2.1));
            let y = g.matmul_nt(other, p);
            let y = g.scale(y, 0.5);
            g.mse_const(y, &Matrix::zeros(3, 2))
        });
    }

    #[test]
    fn gradients_of_row_broadcasts_and_norms() {
        let x = sample(3, 5, 0.9);
        check(sample(1, 5, 0.4), |g, p| {
            let xi = g.input(x.clone());
            let y = g.mul_row(xi, p);
            let y = g.add_row(y, p);
            let y = g.layer_norm_rows(y);
            g.mse_const(y, &sample(3, 5, 1.7))
        });
        check(sample(3, 5, 0.4), |g, p| {
            let y = g.layer_norm_rows(p);
            let y = g.relu(y);
            g.mse_const(y, &sample(3, 5, 1.1))
        });
    }

    #[test]
    fn gradients_of_softmax_family() {
        let mask = [true, false, true, true, true, true, false, true, true];
        check(sample(3, 3, 0.8), |g, p| {
            let y = g.softmax_rows(p, Some(&mask));
            g.mse_const(y, &sample(3, 3, 0.2))
        });
        check(sample(4, 3, 0.6), |g, p| {
            let y = g.log_softmax_rows(p);
            g.smooth_clamp(y, 4.0)
        });
        check(sample(4, 3, 0.6), |g, p| g.cross_entropy(p, &[0, 2, 1, 1]));
        check(sample(2, 3, 0.5), |g, p| {
            g.bce_logits(
                p,
                &Matrix::from_vec(2, 3, vec![1., 0., 1., 0., 0., 1.]).unwrap(),
            )
        });
    }

    #[test]
    fn gradients_of_structural_ops() {
        check(sample(3, 4, 0.35), |g, p| {
            let a = g.slice_cols(p, 0, 2);
            let b = g.slice_cols(p, 2, 2);
            let c = g.concat_cols(&[b, a]);
            let e = g.exp(c);
            let l1 = g.masked_mse(
                e,
                &[0.5; 12],
                &[
                    true, false, true, true, false, true, true, true, false, false, true, true,
                ],
            );
            let l2 = g.mse_const(p, &Matrix::zeros(3, 4));
            g.weighted_sum(&[(l1, 0.7), (l2, 1.3)])
        });
        check(sample(2, 3, 0.35), |g, p| {
            let q = g.input(sample(2, 3, 1.9));
            let d = g.dropout(p, &[true, false, true, true, true, false], 0.25);
            let s = g.add(d, q);
            g.mse(s, q)
        });
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_positions() {
        let mut g = Graph::new();
        let x = g.input(Matrix::from_vec(1, 3, vec![5.0, 1.0, 2.0]).unwrap());
        let y = g.softmax_rows(x, Some(&[false, true, true]));
        assert!(g.value(y).get(0, 0) <= 1e-8);
        assert!((g.value(y).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_clamp_hand_case() {
        let v = Matrix::from_vec(2, 1, vec![0.0, -1.0]).unwrap();
        assert_eq!(smooth_clamp_value(&v, 4.0), 1.0);
        let v = Matrix::from_vec(2, 1, vec![0.0, -10.0]).unwrap();
        assert_eq!(smooth_clamp_value(&v, 4.0), 16.0);
    }
}
