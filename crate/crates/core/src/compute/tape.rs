//! Reverse-mode differentiation over a recorded graph of matrix operations.
//!
//! Every value on the tape is a [`Matrix`]; a batch of `B` samples with `n`
//! features is a `B × n` node. Operations assert their shape contracts: a
//! mismatch here is a bug in the model code, not a recoverable input error,
//! so public model entry points validate user-supplied dimensions first.

use std::collections::HashMap;

use super::{Gradients, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    SumCols(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    LogSumExpCols(Var),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Clone)]
struct ParamLeaf {
    name: String,
    var: Var,
    trainable: bool,
}

/// Recorded computation. Build a fresh tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<ParamLeaf>,
    param_cache: HashMap<String, Var>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::from_vec(m.rows(), 1, (0..m.rows()).map(|r| m.row(r).iter().sum()).collect())
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        if let Some(&v) = self.param_cache.get(&p.name) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf);
        self.param_cache.insert(p.name.clone(), v);
        self.params.push(ParamLeaf { name: p.name.clone(), var: v, trainable: p.trainable });
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (B×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), rm.shape(), "add_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!((1, am.cols()), rm.shape(), "mul_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// `a (B×n) + col (B×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), cm.shape(), "add_col shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            let c = cm[(r, 0)];
            for o in out.row_mut(r) {
                *o += c;
            }
        }
        self.push(out, Op::AddCol(a, col))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!((am.rows(), 1), cm.shape(), "mul_col shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            let c = cm[(r, 0)];
            for o in out.row_mut(r) {
                *o *= c;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// `bound · tanh(a / bound)`: smooth, identity near zero, bounded by `±bound`.
    pub fn soft_clamp(&mut self, a: Var, bound: f64) -> Var {
        let s = self.scale(a, 1.0 / bound);
        let t = self.tanh(s);
        self.scale(t, bound)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hconcat(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        self.push(v, Op::SelectCols(a, idx.to_vec()))
    }

    /// Per-row sum, `B×n → B×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = row_sums(self.value(a));
        self.push(v, Op::SumCols(a))
    }

    /// Per-column mean over the batch, `B×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = col_sums(m);
        v.scale_assign(1.0 / m.rows() as f64);
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::filled(1, 1, m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Rows of `table` picked by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table).select_rows(idx);
        self.push(v, Op::GatherRows(table, idx.to_vec()))
    }

    /// Row-wise log-sum-exp, `B×n → B×1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = (0..m.rows())
            .map(|r| {
                let row = m.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !mx.is_finite() {
                    return mx;
                }
                mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Matrix::from_vec(m.rows(), 1, v);
        self.push(v, Op::LogSumExpCols(a))
    }

    /// Repeat a `1×n` node to `rows×n`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = self.value(a).broadcast_row(rows);
        self.push(v, Op::BroadcastRows(a))
    }

    /// Gradients of the scalar `loss` for every trainable parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!("loss must be 1x1, got {:?}", lv.shape())));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::Numerical(format!("loss is {}", lv[(0, 0)])));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(m) => m.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.matmul(&bm.transpose()));
                    acc(&mut adj, *b, am.transpose().matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.map(|x| -x));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, r) => {
                    acc(&mut adj, *r, col_sums(&g));
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, r) => {
                    let rm = self.value(*r);
                    let am = self.value(*a);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, rm.cols());
                    for row in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga[(row, c)] *= rm[(0, c)];
                            gr[(0, c)] += g[(row, c)] * am[(row, c)];
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *r, gr);
                }
                Op::AddCol(a, c) => {
                    acc(&mut adj, *c, row_sums(&g));
                    acc(&mut adj, *a, g);
                }
                Op::MulCol(a, c) => {
                    let cm = self.value(*c);
                    let am = self.value(*a);
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(g.rows(), 1);
                    for row in 0..g.rows() {
                        for col in 0..g.cols() {
                            ga[(row, col)] *= cm[(row, 0)];
                            gc[(row, 0)] += g[(row, col)] * am[(row, col)];
                        }
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *c, gc);
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.map(|x| k * x)),
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::Tanh(a) => acc(&mut adj, *a, g.zip_map(out, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Exp(a) => acc(&mut adj, *a, g.zip_map(out, |g, y| g * y)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| g / x));
                }
                Op::Sigmoid(a) => acc(&mut adj, *a, g.zip_map(out, |g, y| g * y * (1.0 - y))),
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| g * sigmoid(x)));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| 2.0 * g * x));
                }
                Op::Powf(a, p) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| g * p * x.powf(p - 1.0)));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, g.zip_map(x, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut adj, *p, g.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SelectCols(a, idx) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        for (j, &c) in idx.iter().enumerate() {
                            ga[(r, c)] += g[(r, j)];
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SumCols(a) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..am.rows() {
                        let gr = g[(r, 0)];
                        ga.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::MeanRows(a) => {
                    let am = self.value(*a);
                    let k = 1.0 / am.rows() as f64;
                    let mut row = g.clone();
                    row.scale_assign(k);
                    acc(&mut adj, *a, row.broadcast_row(am.rows()));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let am = self.value(*a);
                    let (r, c) = am.shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g[(0, 0)] / am.len() as f64));
                }
                Op::GatherRows(t, idx) => {
                    let tm = self.value(*t);
                    let mut gt = Matrix::zeros(tm.rows(), tm.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *t, gt);
                }
                Op::LogSumExpCols(a) => {
                    let am = self.value(*a);
                    let mut ga = Matrix::zeros(am.rows(), am.cols());
                    for r in 0..am.rows() {
                        let l = out[(r, 0)];
                        for c in 0..am.cols() {
                            ga[(r, c)] = g[(r, 0)] * (am[(r, c)] - l).exp();
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::BroadcastRows(a) => acc(&mut adj, *a, col_sums(&g)),
            }
        }

        let mut grads = Gradients::new();
        for leaf in &self.params {
            if !leaf.trainable {
                continue;
            }
            let g = adj
                .get_mut(leaf.var.0)
                .and_then(Option::take)
                .unwrap_or_else(|| {
                    let (r, c) = self.value(leaf.var).shape();
                    Matrix::zeros(r, c)
                });
            grads.insert(leaf.name.clone(), g);
        }
        Ok(grads)
    }
}
