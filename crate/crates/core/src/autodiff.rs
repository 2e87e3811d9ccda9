//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a [`Node`] whose parents have strictly smaller ids,
//! so the tape is already in topological order and the reverse sweep is a
//! single backwards scan. Local partials are not materialised when recording:
//! each [`Op`] knows its exact vector–Jacobian product and evaluates it from
//! the stored parent values during [`Tape::backward`].
//!
//! Broadcasting is limited to a `1 × 1` operand against a full tensor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Differentiable input (parameter or state).
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `Σ cᵢ·xᵢ` over same-shaped operands.
    LinComb(Vec<(Var, f64)>),
    /// `a · b`
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    /// `x · wᵀ + 1·bᵀ` with `b` a `1 × out` row.
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    /// `1 − a²`, the derivative of tanh expressed through its output.
    TanhDeriv(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    /// Sum along the feature axis, `B × D → B × 1`.
    SumRows(Var),
    Dot(Var, Var),
    ConcatCols(Var, Var),
    SliceCols { a: Var, start: usize, len: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LinComb(..) => "lincomb",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Affine { .. } => "affine",
            Op::Tanh(..) => "tanh",
            Op::TanhDeriv(..) => "tanh_deriv",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Dot(..) => "dot",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols { .. } => "slice",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Dot(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::TanhDeriv(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SliceCols { a, .. } => vec![*a],
            Op::LinComb(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Gradients of a scalar root with respect to requested leaves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_id: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_id.get(&var.0)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_id.iter().map(|(&id, t)| (Var(id), t))
    }
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
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

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn node(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(Error::NotOnTape(var.0))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push_unchecked(Op::Leaf, value, true))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        Ok(self.push_unchecked(Op::Constant, value, false))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.0 >= self.nodes.len() {
                return Err(Error::NotOnTape(v.0));
            }
        }
        Ok(())
    }

    fn shape_err(op: &'static str, shapes: &[(usize, usize)]) -> Error {
        let detail = shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect::<Vec<_>>().join(", ");
        Error::Shape { op, detail }
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if sa == (1, 1) {
            Ok(Bcast::LeftScalar)
        } else if sb == (1, 1) {
            Ok(Bcast::RightScalar)
        } else {
            Err(Self::shape_err(op, &[sa, sb]))
        }
    }

    fn binary(&self, a: Var, b: Var, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        match mode {
            Bcast::Same => ta.zip_map(tb, f),
            Bcast::LeftScalar => {
                let s = ta.item();
                tb.map(|v| f(s, v))
            }
            Bcast::RightScalar => {
                let s = tb.item();
                ta.map(|v| f(v, s))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("add", a, b)?;
        let v = self.binary(a, b, m, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("sub", a, b)?;
        let v = self.binary(a, b, m, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.bcast("mul", a, b)?;
        let v = self.binary(a, b, m, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.check(&vars)?;
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Shape { op: "lincomb", detail: "no terms".into() });
        };
        let shape = self.value(first).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape {
                return Err(Self::shape_err("lincomb", &[shape, t.shape()]));
            }
            out.axpy(c, t);
        }
        self.push(Op::LinComb(terms.to_vec()), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let v = ta.matmul(tb);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Self::shape_err("matmul_nt", &[ta.shape(), tb.shape()]));
        }
        let v = ta.matmul_nt(tb);
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols() != tw.cols() || tb.shape() != (1, tw.rows()) {
            return Err(Self::shape_err("affine", &[tx.shape(), tw.shape(), tb.shape()]));
        }
        let mut out = Tensor::zeros(tx.rows(), tw.rows());
        let n = tw.rows();
        for r in 0..tx.rows() {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(tb.data());
        }
        gemm(tx, false, tw, true, &mut out, 1.0);
        self.push(Op::Affine { x, w, b }, out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a).map(crate::tensor::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn tanh_deriv(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a).map(|y| 1.0 - y * y);
        self.push(Op::TanhDeriv(a), v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a).map(|y| y * y);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        if self.value(a).is_empty() {
            return Err(Self::shape_err("mean", &[self.value(a).shape()]));
        }
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let v = self.value(a).sum_rows();
        self.push(Op::SumRows(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("dot", &[ta.shape(), tb.shape()]));
        }
        let v = Tensor::scalar(ta.dot(tb));
        self.push(Op::Dot(a, b), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Self::shape_err("concat", &[ta.shape(), tb.shape()]));
        }
        let v = ta.concat_cols(tb);
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("columns {start}..{} of {}x{}", start + len, ta.rows(), ta.cols()),
            });
        }
        let v = ta.slice_cols(start, len);
        self.push(Op::SliceCols { a, start, len }, v)
    }

    /// Reverse sweep from `root` seeded with `seed`; returns the adjoint of
    /// every node that lies on a differentiable path to `root`.
    pub fn adjoints(&self, root: Var, seed: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self.sweep(root, seed, |_| true)
    }

    fn sweep(&self, root: Var, seed: &Tensor, keep: impl Fn(usize) -> bool) -> Result<Vec<Option<Tensor>>> {
        self.check(&[root])?;
        let root_shape = self.value(root).shape();
        if seed.shape() != root_shape {
            return Err(Self::shape_err("backward", &[root_shape, seed.shape()]));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed.clone());
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            if keep(id) {
                adj[id] = Some(g);
            }
        }
        Ok(adj)
    }

    /// Gradients of `root` with respect to each of `wrt`. Leaves without a
    /// path to `root` get an all-zero gradient.
    pub fn gradients(&self, root: Var, seed: &Tensor, wrt: &[Var]) -> Result<Gradients> {
        self.check(wrt)?;
        let wanted: std::collections::BTreeSet<usize> = wrt.iter().map(|v| v.0).collect();
        let mut adj = self.sweep(root, seed, |id| wanted.contains(&id))?;
        let mut by_id = BTreeMap::new();
        for &v in wrt {
            let g = adj.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| {
                let (r, c) = self.value(v).shape();
                Tensor::zeros(r, c)
            });
            by_id.insert(v.0, g);
        }
        Ok(Gradients { by_id })
    }

    /// Convenience for scalar roots: seed 1.
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Result<Gradients> {
        self.gradients(root, &Tensor::scalar(1.0), wrt)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        fn acc(adj: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        }
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.wants(v) {
                        let c = if val(v).is_scalar() && !g.is_scalar() {
                            Tensor::scalar(s * g.sum())
                        } else {
                            g.scale(s)
                        };
                        acc(adj, v, c);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let (tv, to) = (val(v), val(other));
                    let c = if tv.is_scalar() && !g.is_scalar() {
                        let s = if to.is_scalar() { to.item() * g.sum() } else { g.dot(to) };
                        Tensor::scalar(s)
                    } else if to.is_scalar() {
                        g.scale(to.item())
                    } else {
                        g.mul(to)
                    };
                    acc(adj, v, c);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(adj, *a, g.scale(*c));
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        match &mut adj[v.0] {
                            Some(t) => t.axpy(c, g),
                            slot @ None => *slot = Some(g.scale(c)),
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.matmul_nt(val(*b)));
                }
                if self.wants(*b) {
                    acc(adj, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.matmul(val(*b)));
                }
                if self.wants(*b) {
                    acc(adj, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Affine { x, w, b } => {
                if self.wants(*x) {
                    match &mut adj[x.0] {
                        Some(t) => gemm(g, false, val(*w), false, t, 1.0),
                        slot @ None => *slot = Some(g.matmul(val(*w))),
                    }
                }
                if self.wants(*w) {
                    match &mut adj[w.0] {
                        Some(t) => gemm(g, true, val(*x), false, t, 1.0),
                        slot @ None => *slot = Some(g.matmul_tn(val(*x))),
                    }
                }
                if self.wants(*b) {
                    acc(adj, *b, g.sum_cols());
                }
            }
            Op::Tanh(a) => {
                if self.wants(*a) {
                    acc(adj, *a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)));
                }
            }
            Op::TanhDeriv(a) => {
                if self.wants(*a) {
                    acc(adj, *a, g.zip_map(val(*a), |gi, y| -2.0 * y * gi));
                }
            }
            Op::Square(a) => {
                if self.wants(*a) {
                    acc(adj, *a, g.zip_map(val(*a), |gi, y| 2.0 * y * gi));
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let (r, c) = val(*a).shape();
                    let s = if matches!(node.op, Op::Mean(_)) { g.item() / (r * c) as f64 } else { g.item() };
                    acc(adj, *a, Tensor::full(r, c, s));
                }
            }
            Op::SumRows(a) => {
                if self.wants(*a) {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.data()[i];
                        out.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = gi);
                    }
                    acc(adj, *a, out);
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if self.wants(*a) {
                    acc(adj, *a, val(*b).scale(s));
                }
                if self.wants(*b) {
                    acc(adj, *b, val(*a).scale(s));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                if self.wants(*a) {
                    acc(adj, *a, g.slice_cols(0, ca));
                }
                if self.wants(*b) {
                    acc(adj, *b, g.slice_cols(ca, g.cols() - ca));
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.wants(*a) {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(g.row_slice(i));
                    }
                    acc(adj, *a, out);
                }
            }
        }
    }
}

/// Per-coordinate comparison of reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub passed: Vec<bool>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().fold(0.0, |m, &e| m.max(e))
    }

    pub fn all_passed(&self) -> bool {
        self.passed.iter().all(|&p| p)
    }
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is ~0 are judged on absolute error instead.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Denominator floor used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares the reverse-mode gradient of the scalar `f` at `point` against
/// central differences with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y, &[x])?.get(x).cloned().expect("requested gradient").into_data();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p)?;
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, GRAD_CHECK_FLOOR))
        .collect();
    let passed = rel_err.iter().map(|&e| e < tol).collect();
    Ok(GradCheckReport { analytic, numeric, rel_err, passed, tol })
}
