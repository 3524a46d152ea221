//! A small eager reverse-mode automatic differentiation engine over dense
//! row-major `f64` matrices.
//!
//! Every operation is evaluated immediately and recorded on a [`Graph`].
//! Calling [`Graph::backward`] with an arbitrary cotangent seed yields a
//! vector-Jacobian product with respect to every recorded node, which is
//! what both training (scalar losses) and guidance (pullbacks of `x̂(z)`)
//! need.
//!
//! Batches are rows. All ops keep that convention.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a + r` with `r` a single row broadcast over all rows of `a`.
    AddRow(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Silu(usize),
    /// Row-wise RMS normalization; caches the inverse RMS per row.
    RmsNorm(usize, Vec<f64>),
    /// Row-wise softmax, optionally with a causal mask (row `i` sees
    /// columns `0..=i`).
    Softmax(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    Gather(usize, Vec<usize>),
    RepeatRows(usize, usize),
    /// Summed negative log-likelihood over targeted rows, divided by a
    /// normalizer. Caches the softmax probabilities.
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        norm: f64,
        probs: Mat,
    },
    /// `Σ_i w_i Σ_j a_ij²`
    WeightedSqSum(usize, Vec<f64>),
    Sum(usize),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording of an eager computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Cotangents produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads[v.id].as_ref()
    }

    /// Cotangent of `v`, or zeros shaped like it when `v` did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Mat {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Mat::zeros(v.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Mat> {
        self.grads[v.id].take()
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of each row in place; with `causal`, row `i` is restricted to
/// columns `0..=i` and the rest are zero.
fn softmax_rows(m: &mut Mat, causal: bool) {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row
            .iter()
            .take(limit)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            if j < limit {
                *x = (*x - max).exp();
                total += *x;
            } else {
                *x = 0.0;
            }
        }
        row.mapv_inplace(|x| x / total);
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var<'_>, seed: Mat) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[out.id].value.dim(),
            seed.dim(),
            "seed shape must match output"
        );
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&nodes[*b].value.t());
                    let db = nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(&nodes[*b].value);
                    let db = g.t().dot(&nodes[*a].value);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &nodes[*b].value;
                    let db = &g * &nodes[*a].value;
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[*a], g);
                    accumulate(&mut grads[*r], dr);
                }
                Op::Scale(a, c) => accumulate(&mut grads[*a], g * *c),
                Op::Shift(a) => accumulate(&mut grads[*a], g),
                Op::Silu(a) => {
                    let mut da = nodes[*a].value.clone();
                    Zip::from(&mut da).and(&g).for_each(|x, &gy| {
                        let sg = sigmoid(*x);
                        *x = gy * sg * (1.0 + *x * (1.0 - sg));
                    });
                    accumulate(&mut grads[*a], da);
                }
                Op::RmsNorm(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut da = g;
                    for (i, mut row) in da.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let m = row.dot(&yr) / n;
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yy| *d = inv[i] * (*d - yy * m));
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = g;
                    for (i, mut row) in da.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(i);
                        let m = row.dot(&yr);
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yy| *d = yy * (*d - m));
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        accumulate(&mut grads[p], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut da = Mat::zeros(nodes[*a].value.dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[*a], da);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        accumulate(&mut grads[p], g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut da = Mat::zeros(nodes[*a].value.dim());
                    da.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[*a], da);
                }
                Op::Gather(table, ids) => {
                    let mut dt = Mat::zeros(nodes[*table].value.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = dt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[*table], dt);
                }
                Op::RepeatRows(a, k) => {
                    let src = &nodes[*a].value;
                    let mut da = Mat::zeros(src.dim());
                    for (r, row) in g.axis_iter(Axis(0)).enumerate() {
                        let mut dst = da.row_mut(r / k);
                        dst += &row;
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    norm,
                    probs,
                } => {
                    let scale = g[[0, 0]] / norm;
                    let mut dl = Mat::zeros(probs.dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = dl.row_mut(i);
                            row.assign(&probs.row(i));
                            row[t] -= 1.0;
                            row *= scale;
                        }
                    }
                    accumulate(&mut grads[*logits], dl);
                }
                Op::WeightedSqSum(a, w) => {
                    let scale = g[[0, 0]];
                    let mut da = nodes[*a].value.clone();
                    for (i, mut row) in da.axis_iter_mut(Axis(0)).enumerate() {
                        row *= 2.0 * w[i] * scale;
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Sum(a) => {
                    let da = Mat::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads[*a], da);
                }
            }
        }
        Grads { grads }
    }

    /// Reverse pass from a scalar (1×1) output with unit seed.
    pub fn backward_scalar(&self, out: Var<'_>) -> Grads {
        self.backward(out, Mat::from_elem((1, 1), 1.0))
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Ref<'g, Mat> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_owned(&self) -> Mat {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(self, value: Mat, op: Op) -> Var<'g> {
        self.graph.push(value, op)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().dot(&*other.value());
        self.unary(v, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'g>) -> Var<'g> {
        let v = self.value().dot(&other.value().t());
        self.unary(v, Op::MatMulT(self.id, other.id))
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() + &*other.value();
        self.unary(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() - &*other.value();
        self.unary(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let v = &*self.value() * &*other.value();
        self.unary(v, Op::Mul(self.id, other.id))
    }

    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        assert_eq!(row.rows(), 1, "add_row expects a single row");
        let v = &*self.value() + &*row.value();
        self.unary(v, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn shift(self, c: f64) -> Var<'g> {
        let v = &*self.value() + c;
        self.unary(v, Op::Shift(self.id))
    }

    pub fn silu(self) -> Var<'g> {
        let v = self.value().mapv(|x| x * sigmoid(x));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn rms_norm(self, eps: f64) -> Var<'g> {
        let mut v = self.to_owned();
        let n = v.ncols() as f64;
        let mut inv = Vec::with_capacity(v.nrows());
        for mut row in v.axis_iter_mut(Axis(0)) {
            let r = 1.0 / (row.dot(&row) / n + eps).sqrt();
            row *= r;
            inv.push(r);
        }
        self.unary(v, Op::RmsNorm(self.id, inv))
    }

    pub fn softmax(self, causal: bool) -> Var<'g> {
        let mut v = self.to_owned();
        softmax_rows(&mut v, causal);
        self.unary(v, Op::Softmax(self.id))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let views: Vec<Mat> = parts.iter().map(|p| p.to_owned()).collect();
        let v = ndarray::concatenate(Axis(1), &views.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("concat_cols: row counts must agree");
        graph.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value().slice(s![.., start..start + len]).to_owned();
        self.unary(v, Op::SliceCols(self.id, start))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let views: Vec<Mat> = parts.iter().map(|p| p.to_owned()).collect();
        let v = ndarray::concatenate(Axis(0), &views.iter().map(|m| m.view()).collect::<Vec<_>>())
            .expect("concat_rows: column counts must agree");
        graph.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        let v = self.value().slice(s![start..start + len, ..]).to_owned();
        self.unary(v, Op::SliceRows(self.id, start))
    }

    /// Rows of `self` (an embedding table) selected by `ids`.
    pub fn gather(self, ids: &[usize]) -> Var<'g> {
        let table = self.value();
        let mut v = Mat::zeros((ids.len(), table.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&table.row(id));
        }
        drop(table);
        self.unary(v, Op::Gather(self.id, ids.to_vec()))
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(self, k: usize) -> Var<'g> {
        let src = self.value();
        let mut v = Mat::zeros((src.nrows() * k, src.ncols()));
        for (r, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&src.row(r / k));
        }
        drop(src);
        self.unary(v, Op::RepeatRows(self.id, k))
    }

    /// Sum over targeted rows of `-log softmax(row)[target]`, divided by
    /// `norm`. Rows with `None` contribute nothing.
    pub fn cross_entropy(self, targets: &[Option<usize>], norm: f64) -> Var<'g> {
        assert_eq!(targets.len(), self.rows());
        let mut probs = self.to_owned();
        softmax_rows(&mut probs, false);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                // log-softmax recomputed from logits to keep precision
                let row = self.value().row(i).to_owned();
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
                total += lse - row[t];
            }
        }
        let v = Mat::from_elem((1, 1), total / norm);
        self.unary(
            v,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                norm,
                probs,
            },
        )
    }

    pub fn weighted_sq_sum(self, weights: &[f64]) -> Var<'g> {
        assert_eq!(weights.len(), self.rows());
        let total: f64 = self
            .value()
            .axis_iter(Axis(0))
            .zip(weights)
            .map(|(r, w)| w * r.dot(&r))
            .sum();
        self.unary(Mat::from_elem((1, 1), total), Op::WeightedSqSum(self.id, weights.to_vec()))
    }

    pub fn sum(self) -> Var<'g> {
        let v = Mat::from_elem((1, 1), self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }
}
