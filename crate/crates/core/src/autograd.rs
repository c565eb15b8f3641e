//! A reverse-mode autodiff tape over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.

use std::rc::Rc;

use crate::tensor::{lit, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddCol(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    LogEps(Var, T),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNormRows(Var, Vec<T>),
    NormalizeRows(Var, Vec<T>),
    NormalizeCols(Var, Vec<T>),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Rc<[Option<usize>]>),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Norms below this are treated as zero vectors by the normalization ops.
const NORM_FLOOR: f64 = 1e-12;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    straight_through: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            straight_through: true,
        }
    }

    /// A graph whose step nodes back-propagate their true (zero) derivative
    /// instead of the straight-through estimate. Used for finite-difference checks.
    pub fn exact() -> Self {
        Self {
            nodes: Vec::new(),
            straight_through: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes on either side.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Tensor::matmul_t(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, ta, b, tb }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    /// `a (r x c) + v (r x 1)` broadcast along columns.
    pub fn add_col(&mut self, a: Var, v: Var) -> Var {
        let value = broadcast_col(self.value(a), self.value(v), |x, y| x + y);
        self.push(value, Op::AddCol(a, v), &[a, v])
    }

    /// `a (r x c) + v (1 x c)` broadcast along rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(v), |x, y| x + y);
        self.push(value, Op::AddRow(a, v), &[a, v])
    }

    pub fn mul_col(&mut self, a: Var, v: Var) -> Var {
        let value = broadcast_col(self.value(a), self.value(v), |x, y| x * y);
        self.push(value, Op::MulCol(a, v), &[a, v])
    }

    pub fn mul_row(&mut self, a: Var, v: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(v), |x, y| x * y);
        self.push(value, Op::MulRow(a, v), &[a, v])
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        self.push(value, Op::MulScalar(a, s), &[a, s])
    }

    /// `a * scale + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (lit::<T>(scale), lit::<T>(shift));
        let value = self.value(a).map(|x| x * s + b);
        self.push(value, Op::Affine(a, s), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu(x).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    /// `ln(a + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let e = lit::<T>(eps);
        let value = self.value(a).map(|x| (x + e).ln());
        self.push(value, Op::LogEps(a, e), &[a])
    }

    /// Forward: `1[a >= threshold]`. Backward: identity (straight-through).
    pub fn straight_through_step(&mut self, a: Var, threshold: f64) -> Var {
        let th = lit::<T>(threshold);
        let value = self.value(a).map(|x| if x >= th { T::one() } else { T::zero() });
        self.push(value, Op::StraightThrough(a), &[a])
    }

    // ---- normalizations -------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    /// Row softmax. Entries where `mask` is false get probability zero; a row
    /// with no admissible entry is all zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "softmax mask shape mismatch");
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = x.row_slice(i);
            let ok = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) {
                    let e = (v - mx).exp();
                    out.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..c {
                let v = out.get(i, j);
                out.set(i, j, v / z);
            }
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let x = self.value(a).transpose();
        let (r, c) = x.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = x.row_slice(i);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out.set(i, j, e);
                z += e;
            }
            for j in 0..c {
                let v = out.get(i, j);
                out.set(i, j, v / z);
            }
        }
        let value = out.transpose();
        self.push(value, Op::SoftmaxCols(a), &[a])
    }

    /// Zero-mean, unit-variance normalization of every row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let n = lit::<T>(c as f64);
        let e = lit::<T>(eps);
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row_slice(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + e).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.set(i, j, (v - mean) * is);
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows(a, inv_std), &[a])
    }

    /// Divide every row by its L2 norm; zero rows stay zero (and pass no gradient).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let floor = lit::<T>(NORM_FLOOR);
        let mut out = Tensor::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row_slice(i);
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm > floor {
                for (j, &v) in row.iter().enumerate() {
                    out.set(i, j, v / nrm);
                }
            }
            norms.push(nrm);
        }
        self.push(out, Op::NormalizeRows(a, norms), &[a])
    }

    /// Column analogue of [`Graph::normalize_rows`].
    pub fn normalize_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let floor = lit::<T>(NORM_FLOOR);
        let mut norms = vec![T::zero(); c];
        for i in 0..r {
            for (j, n) in norms.iter_mut().enumerate() {
                let v = x.get(i, j);
                *n += v * v;
            }
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
        }
        let value = Tensor::from_fn(r, c, |i, j| {
            if norms[j] > floor {
                x.get(i, j) / norms[j]
            } else {
                T::zero()
            }
        });
        self.push(value, Op::NormalizeCols(a, norms), &[a])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a), &[a])
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out: Vec<T> = (0..x.rows()).map(|i| x.row_slice(i).iter().copied().sum()).collect();
        self.push(Tensor::col(out), Op::SumCols(a), &[a])
    }

    // ---- structure ------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..v.cols() {
                    out.set(i, off + j, v.get(i, j));
                }
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Column gather; `None` entries produce zero columns. Indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: &[Option<usize>]) -> Var {
        let value = self.value(a).gather_cols(idx);
        self.push(value, Op::GatherCols(a, idx.into()), &[a])
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(1, 1));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let ga = if ta {
                        Tensor::matmul_t(bv, tb, gy, true)
                    } else {
                        Tensor::matmul_t(gy, false, bv, !tb)
                    };
                    acc(a, ga);
                }
                if needs(b) {
                    let gb = if tb {
                        Tensor::matmul_t(gy, true, av, ta)
                    } else {
                        Tensor::matmul_t(av, !ta, gy, false)
                    };
                    acc(b, gb);
                }
            }
            &Op::Add(a, b) => {
                acc(a, gy.clone());
                acc(b, gy.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, gy.clone());
                acc(b, gy.scale(-T::one()));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, gy.zip_map(val(b), |g, x| g * x));
                }
                if needs(b) {
                    acc(b, gy.zip_map(val(a), |g, x| g * x));
                }
            }
            &Op::Div(a, b) => {
                let bv = val(b);
                if needs(a) {
                    acc(a, gy.zip_map(bv, |g, x| g / x));
                }
                if needs(b) {
                    let t = gy.zip_map(y, |g, q| g * q);
                    acc(b, t.zip_map(bv, |g, x| -g / x));
                }
            }
            &Op::AddCol(a, v) => {
                acc(a, gy.clone());
                if needs(v) {
                    acc(v, reduce_cols(gy));
                }
            }
            &Op::AddRow(a, v) => {
                acc(a, gy.clone());
                if needs(v) {
                    acc(v, reduce_rows(gy));
                }
            }
            &Op::MulCol(a, v) => {
                if needs(a) {
                    acc(a, broadcast_col(gy, val(v), |g, s| g * s));
                }
                if needs(v) {
                    acc(v, reduce_cols(&gy.zip_map(val(a), |g, x| g * x)));
                }
            }
            &Op::MulRow(a, v) => {
                if needs(a) {
                    acc(a, broadcast_row(gy, val(v), |g, s| g * s));
                }
                if needs(v) {
                    acc(v, reduce_rows(&gy.zip_map(val(a), |g, x| g * x)));
                }
            }
            &Op::MulScalar(a, s) => {
                if needs(a) {
                    acc(a, gy.scale(val(s).item()));
                }
                if needs(s) {
                    let d: T = gy.data().iter().zip(val(a).data()).map(|(&g, &x)| g * x).sum();
                    acc(s, Tensor::scalar(d));
                }
            }
            &Op::Affine(a, s) => acc(a, gy.scale(s)),
            &Op::Sigmoid(a) => acc(a, gy.zip_map(y, |g, s| g * s * (T::one() - s))),
            &Op::Gelu(a) => acc(a, gy.zip_map(val(a), |g, x| g * gelu(x).1)),
            &Op::Exp(a) => acc(a, gy.zip_map(y, |g, e| g * e)),
            &Op::LogEps(a, e) => acc(a, gy.zip_map(val(a), |g, x| g / (x + e))),
            &Op::StraightThrough(a) => {
                if self.straight_through {
                    acc(a, gy.clone())
                }
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = y.shape();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = gy.row_slice(i);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        g.set(i, j, yr[j] * (gr[j] - dot));
                    }
                }
                acc(a, g);
            }
            &Op::SoftmaxCols(a) => {
                let (r, c) = y.shape();
                let mut dots = vec![T::zero(); c];
                for i in 0..r {
                    for (j, d) in dots.iter_mut().enumerate() {
                        *d += y.get(i, j) * gy.get(i, j);
                    }
                }
                acc(a, Tensor::from_fn(r, c, |i, j| y.get(i, j) * (gy.get(i, j) - dots[j])));
            }
            Op::LayerNormRows(a, inv_std) => {
                let (r, c) = y.shape();
                let n = lit::<T>(c as f64);
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = gy.row_slice(i);
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for j in 0..c {
                        g.set(i, j, inv_std[i] * (gr[j] - mg - yr[j] * mgy));
                    }
                }
                acc(*a, g);
            }
            Op::NormalizeRows(a, norms) => {
                let (r, c) = y.shape();
                let floor = lit::<T>(NORM_FLOOR);
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    if norms[i] <= floor {
                        continue;
                    }
                    let yr = y.row_slice(i);
                    let gr = gy.row_slice(i);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        g.set(i, j, (gr[j] - yr[j] * dot) / norms[i]);
                    }
                }
                acc(*a, g);
            }
            Op::NormalizeCols(a, norms) => {
                let (r, c) = y.shape();
                let floor = lit::<T>(NORM_FLOOR);
                let mut dots = vec![T::zero(); c];
                for i in 0..r {
                    for (j, d) in dots.iter_mut().enumerate() {
                        *d += y.get(i, j) * gy.get(i, j);
                    }
                }
                acc(
                    *a,
                    Tensor::from_fn(r, c, |i, j| {
                        if norms[j] <= floor {
                            T::zero()
                        } else {
                            (gy.get(i, j) - y.get(i, j) * dots[j]) / norms[j]
                        }
                    }),
                );
            }
            &Op::Transpose(a) => acc(a, gy.transpose()),
            &Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                acc(a, Tensor::full(r, c, gy.item()));
            }
            &Op::SumRows(a) => {
                let (r, c) = val(a).shape();
                acc(a, Tensor::from_fn(r, c, |_, j| gy.get(0, j)));
            }
            &Op::SumCols(a) => {
                let (r, c) = val(a).shape();
                acc(a, Tensor::from_fn(r, c, |i, _| gy.get(i, 0)));
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = val(a).shape();
                let w = gy.cols();
                acc(
                    a,
                    Tensor::from_fn(r, c, |i, j| {
                        if j >= start && j < start + w {
                            gy.get(i, j - start)
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut g = Tensor::zeros(r, c);
                g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                acc(a, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        acc(p, gy.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if needs(p) {
                        acc(p, gy.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut g = Tensor::zeros(r, c);
                for (k, src) in idx.iter().enumerate() {
                    if let Some(j) = *src {
                        for i in 0..r {
                            let v = g.get(i, j) + gy.get(i, k);
                            g.set(i, j, v);
                        }
                    }
                }
                acc(*a, g);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
#[inline]
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let three = lit::<T>(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let v = half * x * (T::one() + th);
    let d = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
    (v, d)
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    sigmoid(x)
}

fn broadcast_col<T: Real>(a: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(v.shape(), (a.rows(), 1), "column broadcast expects an r x 1 operand");
    Tensor::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), v.get(i, 0)))
}

fn broadcast_row<T: Real>(a: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(v.shape(), (1, a.cols()), "row broadcast expects a 1 x c operand");
    let vs = v.data();
    let mut out = a.clone();
    let c = a.cols();
    for (k, x) in out.data_mut().iter_mut().enumerate() {
        *x = f(*x, vs[k % c]);
    }
    out
}

/// `r x c -> r x 1` sum.
fn reduce_cols<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    Tensor::col((0..g.rows()).map(|i| g.row_slice(i).iter().copied().sum()).collect())
}

/// `r x c -> 1 x c` sum.
fn reduce_rows<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}
