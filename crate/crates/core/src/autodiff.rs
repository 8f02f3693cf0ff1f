//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Graph`] records every operation of a forward pass. Leaves are either
//! trainable (`param`) or constant; gradients are only propagated into nodes
//! that transitively depend on a trainable leaf, so a frozen backbone costs a
//! forward pass plus the activation gradients, never weight gradients.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, T),
    QuickGelu(Var),
    NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, T),
    PickPerRow(Var, Vec<usize>),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that is trainable iff `trainable`.
    pub fn leaf(&mut self, value: Matrix<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "node is not a scalar");
        m.data()[0]
    }

    fn unary(&mut self, a: Var, value: Matrix<T>, op: Op<T>) -> Var {
        let t = self.tracked(a);
        self.push(value, op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix<T>, op: Op<T>) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(rm.data()) {
                *x += b;
            }
        }
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "mul_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "mul_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(rm.data()) {
                *x *= b;
            }
        }
        self.binary(a, row, v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).scale(k);
        self.unary(a, v, Op::Scale(a, k))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).scale(k);
        self.binary(a, s, v, Op::MulScalar(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&crate::tensor::softmax(m.row(r)));
        }
        self.unary(a, v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..m.rows() {
            let lse = crate::tensor::log_sum_exp(m.row(r));
            for x in v.row_mut(r) {
                *x -= lse;
            }
        }
        self.unary(a, v, Op::LogSoftmax(a))
    }

    /// Per-row standardization (zero mean, unit variance); no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let m = self.value(a);
        let n = T::of(m.cols() as f64);
        let mut v = m.clone();
        for r in 0..m.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.unary(a, v, Op::LayerNorm(a, eps))
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let k = T::of(1.702);
        let v = self.value(a).map(|x| x * sigmoid(k * x));
        self.unary(a, v, Op::QuickGelu(a))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..m.rows() {
            let n = crate::tensor::l2_norm(m.row(r));
            for x in v.row_mut(r) {
                *x /= n;
            }
        }
        self.unary(a, v, Op::NormalizeRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.unary(a, v, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "row mismatch in concat_cols");
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "column slice out of range");
        let mut v = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.unary(a, v, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Column-wise mean: `r × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let inv = T::one() / T::of(m.rows() as f64);
        let mut v = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, &x) in v.data_mut().iter_mut().zip(m.row(r)) {
                *o += x * inv;
            }
        }
        self.unary(a, v, Op::MeanRows(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::abs);
        self.unary(a, v, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        self.unary(a, v, Op::Log(a))
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.unary(a, v, Op::ClampMin(a, floor))
    }

    /// Gathers `a[r, idx[r]]` into an `r × 1` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), idx.len(), "one index per row required");
        let data = idx.iter().enumerate().map(|(r, &c)| m[(r, c)]).collect();
        let v = Matrix::from_vec(idx.len(), 1, data);
        self.unary(a, v, Op::PickPerRow(a, idx.to_vec()))
    }

    /// Runs the reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &b) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= b;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*row) {
                    let prod = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&prod));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::MulScalar(a, s) => {
                if self.tracked(*a) {
                    let k = self.scalar(*s);
                    self.accumulate(grads, *a, g.scale(k));
                }
                if self.tracked(*s) {
                    let d = crate::tensor::dot(g.data(), self.value(*a).data());
                    self.accumulate(grads, *s, Matrix::filled(1, 1, d));
                }
            }
            Op::Softmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let s = crate::tensor::dot(y, gy);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = yi * (gi - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gy = g.row(r);
                    let s: T = gy.iter().copied().sum();
                    for ((o, &ly), &gi) in ga.row_mut(r).iter_mut().zip(out.row(r)).zip(gy) {
                        *o = gi - ly.exp() * s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let n = T::of(x.cols() as f64);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().copied().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + *eps).sqrt();
                    let y = out.row(r);
                    let gy = g.row(r);
                    let mean_g = gy.iter().copied().sum::<T>() / n;
                    let mean_gy = crate::tensor::dot(gy, y) / n;
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::QuickGelu(a) => {
                let k = T::of(1.702);
                let ga = self.value(*a).zip_map(g, |x, gi| {
                    let s = sigmoid(k * x);
                    gi * (s + k * x * s * (T::one() - s))
                });
                self.accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::tensor::l2_norm(x.row(r));
                    let y = out.row(r);
                    let gy = g.row(r);
                    let proj = crate::tensor::dot(y, gy);
                    for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gy).zip(y) {
                        *o = (gi - yi * proj) / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start) => {
                if self.tracked(*a) {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.tracked(p) {
                        let mut gp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                if self.tracked(*a) {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = T::one() / T::of(r as f64);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (o, &gi) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = gi * inv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = self.value(*a).zip_map(g, |x, gi| if x > T::zero() {
                    gi
                } else if x < T::zero() {
                    -gi
                } else {
                    T::zero()
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, out.zip_map(g, |y, gi| y * gi)),
            Op::Log(a) => self.accumulate(grads, *a, self.value(*a).zip_map(g, |x, gi| gi / x)),
            Op::ClampMin(a, floor) => {
                let ga = self.value(*a).zip_map(g, |x, gi| if x > *floor { gi } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::PickPerRow(a, idx) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (r, &c) in idx.iter().enumerate() {
                    ga[(r, c)] = g.data()[r];
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is untracked or
    /// does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with zeros filled in for nodes the loss does not reach.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix<T>) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

/// Central finite-difference step used by [`check_gradient`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Matrix<f64>,
    pub numeric: Matrix<f64>,
    /// Largest `|a - n| / max(|a|, |n|)` over entries where `|a - n| > 1e-9`
    /// (entries closer than that count as exact).
    pub max_relative_error: f64,
}

/// Compares the backward pass of the scalar function `build(x)` with
/// central differences of step `h` over every entry of `x`.
pub fn check_gradient(x: &Matrix<f64>, h: f64, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> GradCheckReport {
    let eval = |m: &Matrix<f64>| {
        let mut g = Graph::new();
        let v = g.param(m.clone());
        let out = build(&mut g, v);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = build(&mut g, v);
    let analytic = g.backward(out).get_or_zeros(v, x);
    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(&xp) - eval(&xm)) / (2.0 * h);
    }
    let max_relative_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .filter(|(a, n)| (*a - *n).abs() > 1e-9)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    GradCheckReport { analytic, numeric, max_relative_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(x: Matrix<f64>, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let report = check_gradient(&x, DEFAULT_STEP, build);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Matrix::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn gradients_of_elementary_ops() {
        let w = rand(4, 3, 1);
        let row = rand(1, 3, 2);
        check(rand(2, 4, 3), |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let s = g.quick_gelu(y);
            let sq = g.mul(s, s);
            g.sum(sq)
        });
        check(rand(3, 3, 4), |g, x| {
            let r = g.constant(row.clone());
            let y = g.mul_row(x, r);
            let y = g.add_row(y, r);
            let y = g.layer_norm_rows(y, 1e-5);
            let t = g.transpose(y);
            let z = g.matmul_t(t, x);
            let z = g.softmax_rows(z);
            let p = g.pick_per_row(z, &[0, 2, 1]);
            let l = g.ln(p);
            g.mean(l)
        });
        check(rand(3, 4, 5), |g, x| {
            let n = g.normalize_rows(x);
            let a = g.slice_cols(n, 1, 2);
            let b = g.slice_rows(x, 0, 3);
            let b = g.slice_cols(b, 0, 2);
            let c = g.concat_cols(&[a, b]);
            let d = g.concat_rows(&[c, c]);
            let e = g.log_softmax_rows(d);
            let m = g.mean_rows(e);
            let s = g.abs(m);
            let ex = g.exp(s);
            g.sum(ex)
        });
    }

    #[test]
    fn untracked_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(rand(2, 2, 7));
        let p = g.param(rand(2, 2, 8));
        let y = g.matmul(c, p);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn mul_scalar_and_clamp() {
        let k = rand(1, 1, 9);
        check(rand(2, 3, 10), |g, x| {
            let kv = g.constant(k.clone());
            let y = g.mul_scalar(x, kv);
            let y = g.clamp_min(y, -0.5);
            g.sum(y)
        });
        check(rand(1, 1, 11), |g, s| {
            let a = g.constant(rand(2, 2, 12));
            let y = g.mul_scalar(a, s);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }
}
