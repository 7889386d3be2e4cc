//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward evaluation as a topologically ordered list
//! of nodes. Sparse operators enter as borrowed constants and are never
//! differentiated. [`Tape::backward`] seeds a scalar root and accumulates
//! gradients in reverse recording order, which makes accumulation order (and
//! the resulting bits) deterministic.

use std::cell::Cell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, DenseMatrix};

/// Offset inside [`Tape::sqrt_eps`].
pub const SQRT_EPS: f64 = 1e-10;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<'a> {
    Leaf,
    SpmmConst(&'a CsrMatrix, Var),
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Div(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSelect(Var, Vec<usize>),
    Tanh(Var),
    SigmoidLogLoss(Var),
    SoftmaxRows(Var),
    MeanAll(Var),
    SumAll(Var),
    Square(Var),
    SqrtEps(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    MaxElementwise(Vec<Var>),
    PairwiseSqDists(Var),
    DoubleCenter(Var),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::SpmmConst(..) => "spmm_const",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard_dense",
            Op::Div(..) => "div",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::RowSelect(..) => "row_select",
            Op::Tanh(..) => "tanh",
            Op::SigmoidLogLoss(..) => "sigmoid_logloss",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MeanAll(..) => "mean_all",
            Op::SumAll(..) => "sum_all",
            Op::Square(..) => "square",
            Op::SqrtEps(..) => "sqrt_eps",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::MaxElementwise(..) => "max_elementwise",
            Op::PairwiseSqDists(..) => "pairwise_sq_dists",
            Op::DoubleCenter(..) => "double_center",
        }
    }
}

struct Node<'a> {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    op: Op<'a>,
    requires_grad: bool,
}

/// Fault injection for mutation tests of the gradient checker.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        pub(super) static BROKEN: Cell<Option<&'static str>> = const { Cell::new(None) };
    }

    /// Scales the backward contribution of primitive `name` by 1.5 on this
    /// thread until [`clear`] is called.
    pub fn inject(name: &'static str) {
        BROKEN.with(|b| b.set(Some(name)));
    }

    pub fn clear() {
        BROKEN.with(|b| b.set(None));
    }
}

fn faulty(op: &Op<'_>) -> bool {
    fault::BROKEN.with(Cell::get) == Some(op.name())
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Error {
    Error::ShapeMismatch { op, lhs, rhs }
}

fn map(x: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let data = x.as_slice().iter().map(|&v| f(v)).collect();
    DenseMatrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

fn zip(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

/// `-ln σ(x)` as `softplus(-x)`.
fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// σ(-x), stable for large |x|.
fn sigmoid_neg(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Applies the centring operator `M ↦ M - rowmean - colmean + mean`.
fn center(m: &DenseMatrix, pivot: f64) -> DenseMatrix {
    let (n, k) = m.shape();
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        for (j, &v) in m.row(i).iter().enumerate() {
            let v = v - pivot;
            row_mean[i] += v;
            col_mean[j] += v;
            total += v;
        }
    }
    row_mean.iter_mut().for_each(|r| *r /= k as f64);
    col_mean.iter_mut().for_each(|c| *c /= n as f64);
    let grand = total / (n * k) as f64;
    let mut out = DenseMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            out.set(i, j, (m.get(i, j) - pivot) - row_mean[i] - col_mean[j] + grand);
        }
    }
    out
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    differentiated: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes so the tape can record a new evaluation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    fn push(&mut self, value: DenseMatrix, op: Op<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`, if any
    /// reached it. Only leaves retain gradients.
    pub fn grad(&self, v: Var) -> Option<&DenseMatrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn spmm_const(&mut self, a: &'a CsrMatrix, x: Var) -> Result<Var> {
        let value = a.spmm_dense(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SpmmConst(a, x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = map(self.value(x), |v| v * c);
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn hadamard_dense(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard_dense", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Tape("concat_cols of nothing".into()));
        };
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = DenseMatrix::from_vec(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(shape_err("slice_cols", (r, c), (start, end)));
        }
        let value = self.value(x).slice_cols(start, end);
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn row_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    row: i,
                    col: 0,
                    rows: r,
                    cols: c,
                });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let value = DenseMatrix::from_vec(rows.len(), c, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::RowSelect(x, rows.to_vec()), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = map(self.value(x), f64::tanh);
        let rg = self.needs(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Elementwise `-ln σ(x)`.
    pub fn sigmoid_logloss(&mut self, x: Var) -> Var {
        let value = map(self.value(x), softplus_neg);
        let rg = self.needs(&[x]);
        self.push(value, Op::SigmoidLogLoss(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(Error::Tape("softmax over an empty axis".into()));
        }
        let mut out = DenseMatrix::zeros(r, c);
        for i in 0..r {
            let row = self.value(x).row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out.row_mut(i).iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Tape("mean of an empty matrix".into()));
        }
        let s: f64 = self.value(x).as_slice().iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(DenseMatrix::filled(1, 1, s / n as f64), Op::MeanAll(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).as_slice().iter().sum();
        let rg = self.needs(&[x]);
        self.push(DenseMatrix::filled(1, 1, s), Op::SumAll(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| v * v);
        let rg = self.needs(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    /// Elementwise `√(x + ε)` with ε = [`SQRT_EPS`].
    pub fn sqrt_eps(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| (v + SQRT_EPS).sqrt());
        let rg = self.needs(&[x]);
        self.push(value, Op::SqrtEps(x), rg)
    }

    /// Elementwise `√max(x, 0)`; the gradient is taken as zero where the
    /// output is zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| v.max(0.0).sqrt());
        let rg = self.needs(&[x]);
        self.push(value, Op::Sqrt(x), rg)
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = map(self.value(x), |v| v.max(floor));
        let rg = self.needs(&[x]);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    /// Elementwise maximum over same-shape inputs; ties go to the earliest.
    pub fn max_elementwise(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Tape("max of nothing".into()));
        };
        for &p in &parts[1..] {
            self.same_shape("max_elementwise", first, p)?;
        }
        let mut value = self.value(first).clone();
        for &p in &parts[1..] {
            value = zip(&value, self.value(p), f64::max);
        }
        let rg = self.needs(parts);
        Ok(self.push(value, Op::MaxElementwise(parts.to_vec()), rg))
    }

    /// `D_ij = ‖x_i − x_j‖²` over the rows of `x`.
    pub fn pairwise_sq_dists(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = xv
                    .row(i)
                    .iter()
                    .zip(xv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::PairwiseSqDists(x), rg)
    }

    /// `M − rowmean − colmean + mean` for square `M`.
    pub fn double_center(&mut self, m: Var) -> Result<Var> {
        let (r, c) = self.shape(m);
        if r != c || r == 0 {
            return Err(shape_err("double_center", (r, c), (c, r)));
        }
        // subtracting a pivot first is exact for constant inputs and leaves
        // the centred result unchanged otherwise
        let pivot = self.value(m).get(0, 0);
        let value = center(self.value(m), pivot);
        let rg = self.needs(&[m]);
        Ok(self.push(value, Op::DoubleCenter(m), rg))
    }

    /// Reverse-mode sweep from a 1×1 root. Leaf gradients are available via
    /// [`Tape::grad`] afterwards. A tape can be differentiated once; call
    /// [`Tape::reset`] before recording the next step.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Tape("backward already ran on this tape; reset it first".into()));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Tape(format!(
                "backward root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        self.differentiated = true;
        self.nodes[root.0].grad = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let mut contribs = self.local_grads(idx, &g)?;
            if faulty(&self.nodes[idx].op) {
                for (_, c) in &mut contribs {
                    *c = map(c, |v| v * 1.5);
                }
            }
            for (v, c) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc
                        .as_mut_slice()
                        .iter_mut()
                        .zip(c.as_slice())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::SpmmConst(a, x) => vec![(*x, a.spmm_transpose_dense(g)?)],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul(&val(b).transpose())?),
                (*b, val(a).transpose().matmul(g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |v| -v))],
            Op::Scale(x, c) => vec![(*x, map(g, |v| v * c))],
            Op::Hadamard(a, b) => vec![
                (*a, zip(g, val(b), |gv, bv| gv * bv)),
                (*b, zip(g, val(a), |gv, av| gv * av)),
            ],
            Op::Div(a, b) => {
                let ga = zip(g, val(b), |gv, bv| gv / bv);
                let gb = zip(&zip(g, y, |gv, yv| gv * yv), val(b), |t, bv| -t / bv);
                vec![(*a, ga), (*b, gb)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(p).cols();
                        let s = g.slice_cols(offset, offset + w);
                        offset += w;
                        (*p, s)
                    })
                    .collect()
            }
            Op::SliceCols(x, start) => {
                let (r, c) = val(x).shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                vec![(*x, gx)]
            }
            Op::RowSelect(x, rows) => {
                let (r, c) = val(x).shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for (k, &i) in rows.iter().enumerate() {
                    gx.row_mut(i)
                        .iter_mut()
                        .zip(g.row(k))
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::Tanh(x) => vec![(*x, zip(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::SigmoidLogLoss(x) => vec![(*x, zip(g, val(x), |gv, xv| -gv * sigmoid_neg(xv)))],
            Op::SoftmaxRows(x) => {
                let (r, c) = y.shape();
                let mut gx = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(*x, gx)]
            }
            Op::MeanAll(x) => {
                let (r, c) = val(x).shape();
                vec![(*x, DenseMatrix::filled(r, c, g.get(0, 0) / (r * c) as f64))]
            }
            Op::SumAll(x) => {
                let (r, c) = val(x).shape();
                vec![(*x, DenseMatrix::filled(r, c, g.get(0, 0)))]
            }
            Op::Square(x) => vec![(*x, zip(g, val(x), |gv, xv| 2.0 * xv * gv))],
            Op::SqrtEps(x) => vec![(*x, zip(g, y, |gv, yv| gv / (2.0 * yv)))],
            Op::Sqrt(x) => vec![(
                *x,
                zip(g, y, |gv, yv| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 }),
            )],
            Op::ClampMin(x, floor) => {
                vec![(*x, zip(g, val(x), |gv, xv| if xv > *floor { gv } else { 0.0 }))]
            }
            Op::MaxElementwise(parts) => {
                let n = y.len();
                let mut owner = vec![usize::MAX; n];
                for (k, p) in parts.iter().enumerate() {
                    for (e, (&pv, &yv)) in val(p).as_slice().iter().zip(y.as_slice()).enumerate() {
                        if owner[e] == usize::MAX && pv == yv {
                            owner[e] = k;
                        }
                    }
                }
                parts
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let mut gp = DenseMatrix::zeros(y.rows(), y.cols());
                        for (e, o) in gp.as_mut_slice().iter_mut().enumerate() {
                            if owner[e] == k {
                                *o = g.as_slice()[e];
                            }
                        }
                        (*p, gp)
                    })
                    .collect()
            }
            Op::PairwiseSqDists(x) => {
                let xv = val(x);
                let (n, k) = xv.shape();
                let mut gx = DenseMatrix::zeros(n, k);
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        for c in 0..k {
                            let d = xv.get(i, c) - xv.get(j, c);
                            let cur = gx.get(i, c);
                            gx.set(i, c, cur + w * d);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::DoubleCenter(m) => vec![(*m, center(g, 0.0))],
        })
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Parameter name and flat entry index of the largest error.
    pub worst: Option<(String, usize)>,
    /// Largest relative error per parameter, in input order.
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Entry budget above which [`finite_diff_check`] samples entries.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Compares analytic gradients against central differences with step `h`
/// for every parameter entry (a seeded sample of [`FULL_CHECK_LIMIT`]
/// entries when there are more). The relative error of an entry is
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn finite_diff_check(
    names: &[String],
    params: &[DenseMatrix],
    loss: impl Fn(&[DenseMatrix]) -> Result<f64>,
    gradient: impl Fn(&[DenseMatrix]) -> Result<Vec<DenseMatrix>>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 || names.len() != params.len() {
        return Err(Error::Invalid("finite_diff_check needs h > 0 and one name per parameter".into()));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss = {base}")));
    }
    let analytic = gradient(params)?;

    let total: usize = params.iter().map(DenseMatrix::len).sum();
    let flat: Vec<usize> = if total > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut s = sample(&mut rng, total, FULL_CHECK_LIMIT).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..total).collect()
    };

    let mut work = params.to_vec();
    let mut per_param: Vec<(String, f64)> = names.iter().map(|n| (n.clone(), 0.0)).collect();
    let (mut max_err, mut sum_err) = (0.0f64, 0.0f64);
    let mut worst = None;
    let mut p = 0;
    let mut offset = 0;
    for &f in &flat {
        while f >= offset + params[p].len() {
            offset += params[p].len();
            p += 1;
        }
        let e = f - offset;
        let orig = work[p].as_slice()[e];
        work[p].as_mut_slice()[e] = orig + h;
        let up = loss(&work)?;
        work[p].as_mut_slice()[e] = orig - h;
        let down = loss(&work)?;
        work[p].as_mut_slice()[e] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing {}[{e}]", names[p])));
        }
        let fd = (up - down) / (2.0 * h);
        let ad = analytic[p].as_slice()[e];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        sum_err += rel;
        if rel > per_param[p].1 {
            per_param[p].1 = rel;
        }
        if rel > max_err || worst.is_none() {
            max_err = max_err.max(rel);
            worst = Some((names[p].clone(), e));
        }
    }
    Ok(GradCheckReport {
        checked: flat.len(),
        max_rel_err: max_err,
        mean_rel_err: if flat.is_empty() { 0.0 } else { sum_err / flat.len() as f64 },
        worst,
        per_param,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(r: usize, c: usize, rng: &mut impl Rng) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn primitive_values() {
        let mut t = Tape::new();
        let z = t.constant(DenseMatrix::zeros(1, 1));
        let l = t.sigmoid_logloss(z);
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let x = t.constant(DenseMatrix::filled(2, 8, 0.3));
        let s = t.softmax_rows(x).unwrap();
        assert!(t.value(s).as_slice().iter().all(|&v| (v - 0.125).abs() < 1e-15));

        let x = t.constant(m(&[&[0.0], &[3.0]]));
        let d = t.pairwise_sq_dists(x);
        assert_eq!(t.value(d), &m(&[&[0.0, 9.0], &[9.0, 0.0]]));

        let big = t.constant(DenseMatrix::filled(1, 1, 50.0));
        let l = t.sigmoid_logloss(big);
        assert!(t.scalar(l) <= 1e-20 && t.scalar(l) >= 0.0);
        let neg = t.constant(DenseMatrix::filled(1, 1, -800.0));
        let l = t.sigmoid_logloss(neg);
        assert_eq!(t.scalar(l), 800.0);

        let empty = t.constant(DenseMatrix::zeros(3, 0));
        assert!(t.softmax_rows(empty).is_err());
    }

    #[test]
    fn double_center_of_constant_is_exact_zero() {
        let mut t = Tape::new();
        let c = t.constant(DenseMatrix::filled(7, 7, 1e-5 / 3.0));
        let d = t.double_center(c).unwrap();
        assert!(t.value(d).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_basic_rules() {
        let x0 = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &DenseMatrix::filled(2, 2, 1.0));

        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let h = t.hadamard_dense(x, x).unwrap();
        let s = t.sum_all(h);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &map(&x0, |v| 2.0 * v));
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::filled(2, 2, 1.0));
        assert!(t.backward(x).is_err());
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert!(t.backward(s).is_err());
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn shape_checks() {
        let mut t = Tape::new();
        let a = t.param(DenseMatrix::zeros(2, 3));
        let b = t.param(DenseMatrix::zeros(3, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.hadamard_dense(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.double_center(a).is_err());
        assert!(t.slice_cols(a, 2, 4).is_err());
        assert!(t.row_select(a, &[2]).is_err());
        assert!(t.matmul(a, b).is_ok());
    }

    type Build = fn(&mut Tape<'static>, &[Var]) -> Var;

    /// Random-input central-difference check for single primitives.
    fn check_primitive(name: &str, shapes: &[(usize, usize)], build: Build, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<DenseMatrix> = shapes.iter().map(|&(r, c)| random(r, c, &mut rng)).collect();
        // random projection so the root weights each output entry differently
        let proj_seed = seed.wrapping_add(1000);
        let loss = |p: &[DenseMatrix]| -> Result<f64> {
            let mut t: Tape<'static> = Tape::new();
            let vars: Vec<Var> = p.iter().map(|x| t.param(x.clone())).collect();
            let out = build(&mut t, &vars);
            let (r, c) = t.shape(out);
            let w = random(r, c, &mut ChaCha8Rng::seed_from_u64(proj_seed));
            let w = t.constant(w);
            let prod = t.hadamard_dense(out, w)?;
            let s = t.sum_all(prod);
            Ok(t.scalar(s))
        };
        let gradient = |p: &[DenseMatrix]| -> Result<Vec<DenseMatrix>> {
            let mut t: Tape<'static> = Tape::new();
            let vars: Vec<Var> = p.iter().map(|x| t.param(x.clone())).collect();
            let out = build(&mut t, &vars);
            let (r, c) = t.shape(out);
            let w = random(r, c, &mut ChaCha8Rng::seed_from_u64(proj_seed));
            let w = t.constant(w);
            let prod = t.hadamard_dense(out, w)?;
            let s = t.sum_all(prod);
            t.backward(s)?;
            Ok(vars
                .iter()
                .map(|&v| t.grad(v).cloned().unwrap_or_else(|| DenseMatrix::zeros(t.shape(v).0, t.shape(v).1)))
                .collect())
        };
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("{name}#{i}")).collect();
        let report = finite_diff_check(&names, &params, loss, gradient, 1e-6, 1e-5).unwrap();
        assert!(
            report.passed(),
            "{name}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    static SPARSE: std::sync::OnceLock<CsrMatrix> = std::sync::OnceLock::new();

    #[test]
    fn primitive_gradients_match_central_differences() {
        let sp = SPARSE.get_or_init(|| {
            CsrMatrix::from_triplets(3, 4, &[(0, 0, 0.5), (0, 3, -1.0), (1, 1, 2.0), (2, 0, 1.5), (2, 2, 0.25)])
                .unwrap()
        });
        let _ = sp;
        let cases: Vec<(&str, Vec<(usize, usize)>, Build)> = vec![
            ("spmm_const", vec![(4, 2)], |t, v| t.spmm_const(SPARSE.get().unwrap(), v[0]).unwrap()),
            ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]).unwrap()),
            ("add", vec![(3, 2), (3, 2)], |t, v| t.add(v[0], v[1]).unwrap()),
            ("sub", vec![(3, 2), (3, 2)], |t, v| t.sub(v[0], v[1]).unwrap()),
            ("scale", vec![(3, 2)], |t, v| t.scale(v[0], -2.5)),
            ("hadamard", vec![(3, 2), (3, 2)], |t, v| t.hadamard_dense(v[0], v[1]).unwrap()),
            ("div", vec![(2, 2), (2, 2)], |t, v| {
                let sq = t.square(v[1]);
                let one = t.constant(DenseMatrix::filled(2, 2, 1.0));
                let den = t.add(sq, one).unwrap();
                t.div(v[0], den).unwrap()
            }),
            ("concat_cols", vec![(3, 2), (3, 1)], |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
            ("slice_cols", vec![(3, 4)], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
            ("row_select", vec![(4, 2)], |t, v| t.row_select(v[0], &[3, 0, 3, 1]).unwrap()),
            ("tanh", vec![(3, 3)], |t, v| t.tanh(v[0])),
            ("sigmoid_logloss", vec![(3, 3)], |t, v| {
                let s = t.scale(v[0], 4.0);
                t.sigmoid_logloss(s)
            }),
            ("softmax_rows", vec![(3, 5)], |t, v| t.softmax_rows(v[0]).unwrap()),
            ("mean_all", vec![(3, 5)], |t, v| t.mean_all(v[0]).unwrap()),
            ("sum_all", vec![(3, 5)], |t, v| t.sum_all(v[0])),
            ("square", vec![(3, 5)], |t, v| t.square(v[0])),
            ("sqrt_eps", vec![(3, 3)], |t, v| {
                let s = t.square(v[0]);
                t.sqrt_eps(s)
            }),
            ("sqrt", vec![(3, 3)], |t, v| {
                let s = t.square(v[0]);
                let one = t.constant(DenseMatrix::filled(3, 3, 0.5));
                let p = t.add(s, one).unwrap();
                t.sqrt(p)
            }),
            ("clamp_min", vec![(4, 4)], |t, v| t.clamp_min(v[0], 0.0)),
            ("max_elementwise", vec![(3, 3), (3, 3), (3, 3)], |t, v| t.max_elementwise(v).unwrap()),
            ("pairwise_sq_dists", vec![(5, 3)], |t, v| t.pairwise_sq_dists(v[0])),
            ("double_center", vec![(4, 4)], |t, v| t.double_center(v[0]).unwrap()),
        ];
        for (i, (name, shapes, build)) in cases.into_iter().enumerate() {
            check_primitive(name, &shapes, build, 17 + i as u64);
        }
    }

    #[test]
    fn quadratic_and_independent_parameters() {
        let x0 = m(&[&[0.3, -1.2, 2.0]]);
        let c0 = m(&[&[5.0]]);
        let names = vec!["x".to_string(), "unused".to_string()];
        let loss = |p: &[DenseMatrix]| -> Result<f64> {
            Ok(p[0].as_slice().iter().map(|v| v * v).sum())
        };
        let grad = |p: &[DenseMatrix]| -> Result<Vec<DenseMatrix>> {
            Ok(vec![map(&p[0], |v| 2.0 * v), DenseMatrix::zeros(1, 1)])
        };
        let r = finite_diff_check(&names, &[x0, c0], loss, grad, 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);
        assert_eq!(r.per_param[1].1, 0.0);
    }

    #[test]
    fn injected_fault_is_detected() {
        fault::inject("tanh");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(2, 3, &mut rng);
        let names = vec!["x".to_string()];
        let loss = |p: &[DenseMatrix]| -> Result<f64> {
            let mut t = Tape::new();
            let x = t.param(p[0].clone());
            let y = t.tanh(x);
            let s = t.sum_all(y);
            Ok(t.scalar(s))
        };
        let grad = |p: &[DenseMatrix]| -> Result<Vec<DenseMatrix>> {
            let mut t = Tape::new();
            let x = t.param(p[0].clone());
            let y = t.tanh(x);
            let s = t.sum_all(y);
            t.backward(s)?;
            Ok(vec![t.grad(x).unwrap().clone()])
        };
        let r = finite_diff_check(&names, &[x0], loss, grad, 1e-6, 1e-4).unwrap();
        fault::clear();
        assert!(!r.passed());
        assert_eq!(r.worst.as_ref().unwrap().0, "x");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(6, 4, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let d = t.pairwise_sq_dists(x);
            let e = t.sqrt_eps(d);
            let c = t.double_center(e).unwrap();
            let s = t.softmax_rows(c).unwrap();
            let l = t.mean_all(s).unwrap();
            t.backward(l).unwrap();
            (t.scalar(l).to_bits(), t.grad(x).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
