//! Append-only computation tape with reverse-mode gradients.
//!
//! Every primitive pushes one node holding its forward value. Inputs always
//! precede the node that consumes them, so a single reverse sweep over the
//! node list is a valid topological order for the backward pass.
//!
//! ```
//! use gridbench_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::column(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ColSums(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    SelectCols(Var, Rc<[usize]>),
    SoftmaxRows(Var),
    MaskedFill(Var, Rc<[bool]>),
    Clamp(Var, Rc<Tensor>, Rc<Tensor>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded; build one per forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_distance: f64,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or exact zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(var).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(AutodiffError::Shape {
            op,
            detail: format!("cannot broadcast {}x{} with {}x{}", a.0, a.1, b.0, b.1),
        }),
    }
}

#[inline]
fn bget(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    t.get(rr, cc)
}

fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let (rows, cols) = broadcast_shape(op, a.shape(), b.shape())?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(bget(a, r, c), bget(b, r, c)));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let rr = if shape.0 == 1 { 0 } else { r };
            let cc = if shape.1 == 1 { 0 } else { c };
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from any nondifferentiable point seen so far
    /// (ReLU/abs/max kinks and clamp bounds). Finite-difference audits use it
    /// to reject evaluation points near a kink.
    pub fn min_kink_distance(&self) -> f64 {
        self.kink_distance
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn note_kinks(&mut self, a: Var) {
        if !self.rg(a) {
            return;
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.kink_distance = self.kink_distance.min(d);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let value = Tensor::scalar(t.sum() / n);
        let rg = self.rg(a);
        self.push(Op::Mean(a), value, rg)
    }

    /// Sum of each row, giving an `r x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let value = Tensor::column(sums);
        let rg = self.rg(a);
        self.push(Op::RowSums(a), value, rg)
    }

    /// Sum of each column, giving a `1 x c` row.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut sums = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (s, &x) in sums.iter_mut().zip(t.row_slice(r)) {
                *s += x;
            }
        }
        let value = Tensor::row(sums);
        let rg = self.rg(a);
        self.push(Op::ColSums(a), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.note_kinks(a);
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, 0)`; identical to [`Tape::relu`] but kept as its own primitive
    /// for residual clipping.
    pub fn max_with_zero(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.note_kinks(a);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.note_kinks(a);
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Horizontal concatenation; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    detail: "no inputs".into(),
                })
            }
        };
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {} and {}", rows, t.rows()),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Vertical concatenation; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    detail: "no inputs".into(),
                })
            }
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {} and {}", cols, t.cols()),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    /// `out[k] = a[index[k]]`.
    pub fn gather_rows(&mut self, a: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            if i >= t.rows() {
                return Err(AutodiffError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::from_vec(index.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, index), value, rg))
    }

    /// `out[index[k]] += a[k]` into an `out_rows x cols` zero matrix.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        index: impl Into<Rc<[usize]>>,
        out_rows: usize,
    ) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let t = self.value(a);
        if index.len() != t.rows() {
            return Err(AutodiffError::Shape {
                op: "scatter_add_rows",
                detail: format!("{} indices for {} rows", index.len(), t.rows()),
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(out_rows, cols);
        for (k, &i) in index.iter().enumerate() {
            if i >= out_rows {
                return Err(AutodiffError::Index {
                    op: "scatter_add_rows",
                    index: i,
                    extent: out_rows,
                });
            }
            for c in 0..cols {
                let v = out.get(i, c) + t.get(k, c);
                out.set(i, c, v);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ScatterAddRows(a, index), out, rg))
    }

    /// `out[:, k] = a[:, index[k]]`.
    pub fn select_cols(&mut self, a: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&c| c >= t.cols()) {
            return Err(AutodiffError::Index {
                op: "select_cols",
                index: bad,
                extent: t.cols(),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * index.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            data.extend(index.iter().map(|&c| row[c]));
        }
        let value = Tensor::from_vec(t.rows(), index.len(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SelectCols(a, index), value, rg))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero weight;
    /// a row with no finite entry yields an all-zero row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out.set(r, c, e);
                total += e;
            }
            for c in 0..t.cols() {
                let v = out.get(r, c) / total;
                out.set(r, c, v);
            }
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), out, rg)
    }

    /// Replace entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: impl Into<Rc<[bool]>>, fill: f64) -> Result<Var> {
        let mask: Rc<[bool]> = mask.into();
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(AutodiffError::Shape {
                op: "masked_fill",
                detail: format!("mask of {} for {} values", mask.len(), t.len()),
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::from_vec(t.rows(), t.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MaskedFill(a, mask), value, rg))
    }

    /// Elementwise clamp into `[lo, hi]` (same shape as `a`). The gradient
    /// passes through inside the closed interval and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: Rc<Tensor>, hi: Rc<Tensor>) -> Result<Var> {
        let t = self.value(a);
        if lo.shape() != t.shape() || hi.shape() != t.shape() {
            return Err(AutodiffError::Shape {
                op: "clamp",
                detail: format!(
                    "bounds {:?}/{:?} for value {:?}",
                    lo.shape(),
                    hi.shape(),
                    t.shape()
                ),
            });
        }
        let mut dist = f64::INFINITY;
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&x, (&l, &h))| {
                if l < h {
                    dist = dist.min((x - l).abs()).min((h - x).abs());
                }
                x.max(l).min(h)
            })
            .collect();
        let value = Tensor::from_vec(t.rows(), t.cols(), data)?;
        if self.rg(a) {
            self.kink_distance = self.kink_distance.min(dist);
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Clamp(a, lo, hi), value, rg))
    }

    /// Reverse sweep from a `1 x 1` loss. Pure in the tape: calling it twice
    /// returns identical, independent gradient maps.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    self.acc(&mut grads, *a, || reduce_to(g.clone(), sa));
                    self.acc(&mut grads, *b, || reduce_to(g.clone(), sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                    self.acc(&mut grads, *a, || reduce_to(g.clone(), sa));
                    self.acc(&mut grads, *b, || reduce_to(g.scale(-1.0), sb));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || {
                        let full = broadcast_zip("mul", &g, tb, |x, y| x * y)
                            .expect("shape checked in forward");
                        reduce_to(full, ta.shape())
                    });
                    self.acc(&mut grads, *b, || {
                        let full = broadcast_zip("mul", &g, ta, |x, y| x * y)
                            .expect("shape checked in forward");
                        reduce_to(full, tb.shape())
                    });
                }
                Op::Neg(a) => self.acc(&mut grads, *a, || g.scale(-1.0)),
                Op::Scale(a, k) => self.acc(&mut grads, *a, || g.scale(*k)),
                Op::AddScalar(a) => self.acc(&mut grads, *a, || g.clone()),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || {
                        g.matmul(&tb.transpose()).expect("shape checked in forward")
                    });
                    self.acc(&mut grads, *b, || {
                        ta.transpose().matmul(&g).expect("shape checked in forward")
                    });
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, || g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.data()[0];
                    self.acc(&mut grads, *a, || Tensor::full(r, c, s));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.data()[0] / ((r * c).max(1) as f64);
                    self.acc(&mut grads, *a, || Tensor::full(r, c, s));
                }
                Op::RowSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                t.set(i, j, g.get(i, 0));
                            }
                        }
                        t
                    });
                }
                Op::ColSums(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                t.set(i, j, g.get(0, j));
                            }
                        }
                        t
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let s = *slope;
                    self.acc(&mut grads, *a, || {
                        g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { s * gi })
                    });
                }
                Op::Sigmoid(a) => {
                    self.acc(&mut grads, *a, || g.zip_map(out, |gi, y| gi * y * (1.0 - y)))
                }
                Op::Tanh(a) => self.acc(&mut grads, *a, || g.zip_map(out, |gi, y| gi * (1.0 - y * y))),
                Op::Exp(a) => self.acc(&mut grads, *a, || g.zip_map(out, |gi, y| gi * y)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || g.zip_map(x, |gi, xi| gi / xi));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || g.zip_map(x, |gi, xi| 2.0 * gi * xi));
                }
                Op::Sqrt(a) => self.acc(&mut grads, *a, || g.zip_map(out, |gi, y| gi * 0.5 / y)),
                Op::Abs(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        g.zip_map(x, |gi, xi| {
                            if xi > 0.0 {
                                gi
                            } else if xi < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        })
                    });
                }
                Op::Sin(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || g.zip_map(x, |gi, xi| gi * xi.cos()));
                }
                Op::Cos(a) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || g.zip_map(x, |gi, xi| -gi * xi.sin()));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let start = offset;
                        self.acc(&mut grads, p, || {
                            let mut t = Tensor::zeros(r, c);
                            for i in 0..r {
                                for j in 0..c {
                                    t.set(i, j, g.get(i, start + j));
                                }
                            }
                            t
                        });
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let start = offset * c;
                        self.acc(&mut grads, p, || {
                            Tensor::from_vec(r, c, g.data()[start..start + r * c].to_vec())
                                .expect("slice length matches")
                        });
                        offset += r;
                    }
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(r, c);
                        for (k, &src) in index.iter().enumerate() {
                            for j in 0..c {
                                let v = t.get(src, j) + g.get(k, j);
                                t.set(src, j, v);
                            }
                        }
                        t
                    });
                }
                Op::ScatterAddRows(a, index) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(r, c);
                        for (k, &dst) in index.iter().enumerate() {
                            for j in 0..c {
                                t.set(k, j, g.get(dst, j));
                            }
                        }
                        t
                    });
                }
                Op::SelectCols(a, index) => {
                    let (r, c) = self.value(*a).shape();
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(r, c);
                        for i in 0..r {
                            for (k, &src) in index.iter().enumerate() {
                                let v = t.get(i, src) + g.get(i, k);
                                t.set(i, src, v);
                            }
                        }
                        t
                    });
                }
                Op::SoftmaxRows(a) => {
                    self.acc(&mut grads, *a, || {
                        let mut t = Tensor::zeros(out.rows(), out.cols());
                        for r in 0..out.rows() {
                            let y = out.row_slice(r);
                            let gr = g.row_slice(r);
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..out.cols() {
                                t.set(r, c, y[c] * (gr[c] - dot));
                            }
                        }
                        t
                    });
                }
                Op::MaskedFill(a, mask) => {
                    self.acc(&mut grads, *a, || {
                        let data = g
                            .data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gi, &m)| if m { 0.0 } else { gi })
                            .collect();
                        Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    self.acc(&mut grads, *a, || {
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data())
                            .zip(lo.data().iter().zip(hi.data()))
                            .map(|((&gi, &xi), (&l, &h))| if xi >= l && xi <= h { gi } else { 0.0 })
                            .collect();
                        Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
