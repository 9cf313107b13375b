//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record in reverse and accumulates adjoints into every node that
//! transitively depends on a leaf created with `requires_grad`.

use std::sync::Arc;

use super::special::{normal_cdf, normal_pdf, sigmoid, softplus};
use super::sparse::SparseMatrix;
use super::tensor::Tensor2;
use crate::error::{NsgError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smallest noise scale admitted by the load estimator.
pub const MIN_NOISE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    RowSoftmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    ColSum(Var),
    Transpose(Var),
    Reshape(Var),
    Propagate(Var, Arc<SparseMatrix>),
    CenterCols(Var),
    RowDot(Var, Var),
    TopKSoftmax(Var),
    CvSquared(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        rows: Arc<[usize]>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<[f64]>,
    },
    LoadProbability {
        clean: Var,
        raw_noise: Var,
        eps: Arc<Tensor2>,
        /// Per (row, expert): index of the exclusive threshold entry, or
        /// `usize::MAX` when the probability is constant.
        thresholds: Vec<usize>,
        z: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Recording of a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> NsgError {
    NsgError::ShapeMismatch { op, lhs, rhs }
}

/// Indices of the `k` largest entries, ties broken towards lower index.
/// Returned in descending-score order.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

/// Index of the `k`-th largest entry of `row` with entry `skip` removed,
/// using the same tie rule as [`top_k_indices`]. `None` when fewer than `k`
/// entries remain.
pub fn kth_largest_excluding(row: &[f64], skip: usize, k: usize) -> Option<usize> {
    if k == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    if idx.len() < k {
        return None;
    }
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Some(idx[k - 1])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// `x + 1·b` for a `1 x cols` row vector `b`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != (1, xs.1) {
            return Err(shape_err("add_row", xs, bs));
        }
        let mut value = self.value(x).clone();
        let brow = self.value(b).row(0).to_vec();
        for r in 0..xs.0 {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(&brow) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x ⊙ 1·g` for a `1 x cols` row vector `g` (per-column scaling).
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if gs != (1, xs.1) {
            return Err(shape_err("mul_row", xs, gs));
        }
        let mut value = self.value(x).clone();
        let grow = self.value(g).row(0).to_vec();
        for r in 0..xs.0 {
            for (o, &gg) in value.row_mut(r).iter_mut().zip(&grow) {
                *o *= gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(value, Op::MulRow(x, g), rg))
    }

    /// `diag(s) · x` for a `rows x 1` column vector `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss != (xs.0, 1) {
            return Err(shape_err("scale_rows", xs, ss));
        }
        let mut value = self.value(x).clone();
        for r in 0..xs.0 {
            let w = self.value(s)[(r, 0)];
            for o in value.row_mut(r) {
                *o *= w;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleRows(x, s), rg))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(value, Op::RowSoftmax(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(value, Op::Softplus(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor2::concat_cols(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let value = self.value(x).gather_rows(&idx)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, idx), rg))
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor2::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Column sums, as `1 x cols`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).col_sums();
        let rg = self.rg(x);
        self.push(value, Op::ColSum(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if rows * cols != xv.len() {
            return Err(shape_err("reshape", xv.shape(), (rows, cols)));
        }
        let value = Tensor2::from_vec(rows, cols, xv.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `S · x` for a constant sparse operator.
    pub fn propagate(&mut self, x: Var, op: Arc<SparseMatrix>) -> Result<Var> {
        let xs = self.shape(x);
        if op.cols() != xs.0 {
            return Err(shape_err("propagate", (op.rows(), op.cols()), xs));
        }
        let value = op.apply(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Propagate(x, op), rg))
    }

    /// Subtracts the per-column mean over rows.
    pub fn center_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.rows().max(1) as f64;
        let mean = v.col_sums().scale(1.0 / n);
        let mut value = v.clone();
        for r in 0..value.rows() {
            for (o, &m) in value.row_mut(r).iter_mut().zip(mean.row(0)) {
                *o -= m;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::CenterCols(x), rg)
    }

    /// Row-wise inner products, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("row_dot", av.shape(), bv.shape()));
        }
        let value = Tensor2::from_fn(av.rows(), 1, |r, _| {
            super::tensor::dot(av.row(r), bv.row(r))
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Row-wise softmax restricted to the `k` largest entries; every other
    /// entry becomes exactly zero.
    pub fn topk_softmax(&mut self, x: Var, k: usize) -> Var {
        let src = self.value(x);
        let mut value = Tensor2::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = src.row(r);
            let sel = top_k_indices(row, k);
            let mut vals: Vec<f64> = sel.iter().map(|&j| row[j]).collect();
            softmax_in_place(&mut vals);
            for (&j, p) in sel.iter().zip(vals) {
                value[(r, j)] = p;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::TopKSoftmax(x), rg)
    }

    /// Squared coefficient of variation over all entries, using the
    /// population standard deviation. Zero for a single entry or zero mean.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let value = Tensor2::filled(1, 1, cv_squared(self.value(x).data()));
        let rg = self.rg(x);
        self.push(value, Op::CvSquared(x), rg)
    }

    /// Mean of `-log softmax(logits)[label]` over the selected rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
        rows: Arc<[usize]>,
    ) -> Result<Var> {
        if rows.is_empty() {
            return Err(NsgError::InvalidConfig(
                "cross-entropy over an empty row set".into(),
            ));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        for &r in rows.iter() {
            let label = labels[r];
            if label >= z.cols() {
                return Err(NsgError::InvalidConfig(format!(
                    "label {label} out of range for {} classes",
                    z.cols()
                )));
            }
            total += log_sum_exp(z.row(r)) - z[(r, label)];
        }
        let value = Tensor2::filled(1, 1, total / rows.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                rows,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<[f64]>) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != targets.len() || z.rows() == 0 {
            return Err(shape_err("bce_with_logits", z.shape(), (targets.len(), 1)));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.iter())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum();
        let value = Tensor2::filled(1, 1, total / z.rows() as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceWithLogits { logits, targets }, rg))
    }

    /// Probability that each expert enters the top-`k` when only its own
    /// noise draw is resampled:
    /// `Φ((clean_e − kth_excl(S, e)) / softplus(raw_noise_e))` with the
    /// realised scores `S = clean + eps ⊙ softplus(raw_noise)`.
    pub fn load_probability(
        &mut self,
        clean: Var,
        raw_noise: Var,
        eps: Arc<Tensor2>,
        k: usize,
    ) -> Result<Var> {
        let (c, rn) = (self.value(clean), self.value(raw_noise));
        if c.shape() != rn.shape() || c.shape() != eps.shape() {
            return Err(shape_err("load_probability", c.shape(), rn.shape()));
        }
        let (rows, ne) = c.shape();
        let mut value = Tensor2::zeros(rows, ne);
        let mut thresholds = vec![usize::MAX; rows * ne];
        let mut z = vec![0.0; rows * ne];
        for r in 0..rows {
            let realized: Vec<f64> = (0..ne)
                .map(|e| c[(r, e)] + eps[(r, e)] * softplus(rn[(r, e)]))
                .collect();
            for e in 0..ne {
                match kth_largest_excluding(&realized, e, k) {
                    None => value[(r, e)] = 1.0,
                    Some(j) => {
                        let scale = softplus(rn[(r, e)]).max(MIN_NOISE_SCALE);
                        let zz = (c[(r, e)] - realized[j]) / scale;
                        value[(r, e)] = normal_cdf(zz);
                        thresholds[r * ne + e] = j;
                        z[r * ne + e] = zz;
                    }
                }
            }
        }
        let rg = self.rg(clean) || self.rg(raw_noise);
        Ok(self.push(
            value,
            Op::LoadProbability {
                clean,
                raw_noise,
                eps,
                thresholds,
                z,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NsgError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *g = None;
            } else if g.is_none() {
                let (r, c) = self.nodes[i].value.shape();
                *g = Some(Tensor2::zeros(r, c));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, delta: Tensor2| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_t(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t_matmul(g).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                acc(*b, g.col_sums());
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.hadamard(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    acc(*b, g.hadamard(self.value(*a)).unwrap());
                }
            }
            Op::MulRow(x, gm) => {
                let xv = self.value(*x);
                let gv = self.value(*gm);
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        for (o, &s) in dx.row_mut(r).iter_mut().zip(gv.row(0)) {
                            *o *= s;
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gm) {
                    acc(*gm, g.hadamard(xv).unwrap().col_sums());
                }
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let w = sv[(r, 0)];
                        for o in dx.row_mut(r) {
                            *o *= w;
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*s) {
                    let ds = Tensor2::from_fn(xv.rows(), 1, |r, _| {
                        super::tensor::dot(g.row(r), xv.row(r))
                    });
                    acc(*s, ds);
                }
            }
            Op::RowSoftmax(x) | Op::TopKSoftmax(x) => {
                // Unselected entries have p = 0, so the same Jacobian applies.
                let mut dx = Tensor2::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let inner = super::tensor::dot(p, gr);
                    for ((o, &pp), &gg) in dx.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *o = pp * (gg - inner);
                    }
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (o, &s) in dx.data_mut().iter_mut().zip(out.data()) {
                    *o *= s * (1.0 - s);
                }
                acc(*x, dx);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *o *= sigmoid(v);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        acc(*p, g.slice_cols(start, start + w).unwrap());
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor2::zeros(r, c);
                for row in 0..r {
                    dx.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                acc(*x, dx);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor2::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, &gg) in dx.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += gg;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Tensor2::filled(r, c, g.scalar()));
            }
            Op::ColSum(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Tensor2::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Reshape(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Tensor2::from_vec(r, c, g.data().to_vec()).unwrap());
            }
            Op::Propagate(x, s) => acc(*x, s.apply_transpose(g)),
            Op::CenterCols(x) => {
                let n = g.rows().max(1) as f64;
                let mean = g.col_sums().scale(1.0 / n);
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    for (o, &m) in dx.row_mut(r).iter_mut().zip(mean.row(0)) {
                        *o -= m;
                    }
                }
                acc(*x, dx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = Tensor2::from_fn(bv.rows(), bv.cols(), |r, c| g[(r, 0)] * bv[(r, c)]);
                    acc(*a, d);
                }
                if self.rg(*b) {
                    let d = Tensor2::from_fn(av.rows(), av.cols(), |r, c| g[(r, 0)] * av[(r, c)]);
                    acc(*b, d);
                }
            }
            Op::CvSquared(x) => {
                let xv = self.value(*x);
                let grad = cv_squared_grad(xv.data());
                let d = Tensor2::from_vec(xv.rows(), xv.cols(), grad)
                    .unwrap()
                    .scale(g.scalar());
                acc(*x, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                rows,
            } => {
                let z = self.value(*logits);
                let mut dz = Tensor2::zeros(z.rows(), z.cols());
                let w = g.scalar() / rows.len() as f64;
                for &r in rows.iter() {
                    let mut p = z.row(r).to_vec();
                    softmax_in_place(&mut p);
                    p[labels[r]] -= 1.0;
                    for (o, pp) in dz.row_mut(r).iter_mut().zip(p) {
                        *o += w * pp;
                    }
                }
                acc(*logits, dz);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let w = g.scalar() / z.rows() as f64;
                let d = Tensor2::from_fn(z.rows(), 1, |r, _| w * (sigmoid(z[(r, 0)]) - targets[r]));
                acc(*logits, d);
            }
            Op::LoadProbability {
                clean,
                raw_noise,
                eps,
                thresholds,
                z,
            } => {
                let rn = self.value(*raw_noise);
                let (rows, ne) = rn.shape();
                let mut dc = Tensor2::zeros(rows, ne);
                let mut dr = Tensor2::zeros(rows, ne);
                for r in 0..rows {
                    for e in 0..ne {
                        let j = thresholds[r * ne + e];
                        if j == usize::MAX {
                            continue;
                        }
                        let zz = z[r * ne + e];
                        let sp_raw = softplus(rn[(r, e)]);
                        let scale = sp_raw.max(MIN_NOISE_SCALE);
                        let gp = g[(r, e)] * normal_pdf(zz) / scale;
                        dc[(r, e)] += gp;
                        dc[(r, j)] -= gp;
                        dr[(r, j)] -= gp * eps[(r, j)] * sigmoid(rn[(r, j)]);
                        if sp_raw > MIN_NOISE_SCALE {
                            dr[(r, e)] -= gp * zz * sigmoid(rn[(r, e)]);
                        }
                    }
                }
                acc(*clean, dc);
                acc(*raw_noise, dr);
            }
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `(std_pop / mean)^2`, zero for fewer than two entries or zero mean.
pub fn cv_squared(v: &[f64]) -> f64 {
    let k = v.len();
    if k < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / k as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k as f64;
    var / (mean * mean)
}

fn cv_squared_grad(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    if k < 2 {
        return vec![0.0; k];
    }
    let kf = k as f64;
    let mean = v.iter().sum::<f64>() / kf;
    if mean == 0.0 {
        return vec![0.0; k];
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / kf;
    v.iter()
        .map(|&x| 2.0 * (x - mean) / (kf * mean * mean) - 2.0 * var / (kf * mean.powi(3)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_twice_w() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor2::from_rows(&[vec![0.0, 1.5], vec![-2.0, 0.0]]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &tape.value(w).scale(2.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor2::zeros(2, 3));
        let s = tape.sigmoid(w);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor2::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(NsgError::NonScalarLoss(2, 2))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor2::filled(1, 1, 3.0));
        let w = tape.param(Tensor2::filled(1, 1, 2.0));
        let p = tape.mul(c, w).unwrap();
        tape.backward(p).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().scalar(), 3.0);
    }

    #[test]
    fn uniform_softmax_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::filled(2, 5, 0.7));
        let s = tape.row_softmax(x);
        assert!(tape.value(s).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.0, 0.0, 0.0, 0.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
        assert_eq!(kth_largest_excluding(&[1.0, 3.0, 3.0, 2.0], 1, 2), Some(3));
        assert_eq!(kth_largest_excluding(&[1.0, 2.0], 0, 2), None);
    }

    #[test]
    fn cv_squared_conventions() {
        assert_eq!(cv_squared(&[5.0]), 0.0);
        assert_eq!(cv_squared(&[0.0, 0.0]), 0.0);
        assert_eq!(cv_squared(&[2.0, 2.0, 2.0]), 0.0);
        assert!((cv_squared(&[1.0, 3.0]) - 0.25).abs() < 1e-15);
    }
}
