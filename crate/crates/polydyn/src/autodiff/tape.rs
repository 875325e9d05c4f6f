//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The tape is an append-only arena of nodes. Every op records its parents
//! and enough data to compute a vector-Jacobian product; [`Tape::backward`]
//! sweeps the arena once in reverse creation order, which is a reverse
//! topological order because parents always precede children.
//!
//! Two properties matter for the particle filter built on top:
//!
//! * forward values are computed identically whether or not any leaf
//!   requires gradients, so a non-differentiated run is bit-identical to a
//!   differentiated one;
//! * [`Tape::stop_gradient`] is the identity on values and contributes
//!   nothing to any adjoint.

use std::sync::Arc;

use super::exponents::Exponents;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("logsumexp over fully degenerate input (all entries -inf)")]
    DegenerateLogSumExp,
    #[error("backward requires a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("backward called twice on the same tape without reset")]
    BackwardTwice,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad { x: usize },
    Add { a: usize, b: usize },
    AddN { xs: Vec<usize> },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { x: usize },
    /// out = mul * x + add, elementwise with constants.
    Affine { x: usize, mul: f64 },
    PowInt { x: usize, n: i32 },
    Exp { x: usize },
    Ln { x: usize },
    Sin { x: usize },
    Cos { x: usize },
    /// Full reduction to a scalar.
    Sum { x: usize },
    /// sum(a .* b) over all entries.
    Dot { a: usize, b: usize },
    Matmul { a: usize, b: usize },
    /// out = a * b^T.
    MatmulNT { a: usize, b: usize },
    /// KxN -> Kx1 row reduction.
    RowSum { x: usize },
    /// log sum exp over every entry, scalar output.
    LogSumExp { x: usize },
    /// Elementwise max; on ties the gradient goes to `a`.
    MaxElem { a: usize, b: usize },
    /// Row selection with repetition; backward scatter-adds.
    GatherRows { x: usize, idx: Vec<usize> },
    /// mat (KxN) + row (1xN), broadcast over rows.
    AddRowBcast { mat: usize, row: usize },
    /// mat (KxN) .* col (Kx1), broadcast over columns.
    MulColBcast { mat: usize, col: usize },
    /// mat .* s where s is a 1x1 node.
    MulScalarBcast { mat: usize, s: usize },
    /// mat - s where s is a 1x1 node.
    SubScalarBcast { mat: usize, s: usize },
    /// x + constant tensor (the constant is not a node).
    AddConst { x: usize },
    /// row (constant 1xN) - mat, broadcast over rows.
    SubFromConstRow { mat: usize },
    /// atan2(sin x, cos x); identity gradient almost everywhere.
    WrapAngle { x: usize },
    /// out = monomials(x) * c^T with x KxN, c PxM, out KxP.
    PolyMean { x: usize, c: usize, exps: Arc<Exponents> },
    /// out[k] = x[k,:] * inv * x[k,:]^T for a constant symmetric `inv`.
    RowQuadForm { x: usize, inv: Arc<Tensor> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }

    /// Gradient with zeros substituted when nothing flowed.
    pub fn grad_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.adjoints[v.0].clone().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    /// Number of nodes touched by the backward sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A leaf that never participates in backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Identity on values; blocks all gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGrad { x: x.0 }, value, false)
    }

    // ── Elementwise arithmetic ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let value = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.iter().zip(tb.iter()).map(|(x, y)| x + y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add { a: a.0, b: b.0 }, value, ng)
    }

    /// Sum of several same-shaped vars.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n needs at least one input");
        let shape = self.value(xs[0]).shape();
        let mut data = self.value(xs[0]).data().to_vec();
        for &x in &xs[1..] {
            assert_eq!(self.value(x).shape(), shape, "add_n shape mismatch");
            for (d, v) in data.iter_mut().zip(self.value(x).iter()) {
                *d += v;
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        let ids = xs.iter().map(|v| v.0).collect();
        self.push(Op::AddN { xs: ids }, Tensor::new(shape.0, shape.1, data), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let value = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.iter().zip(tb.iter()).map(|(x, y)| x - y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub { a: a.0, b: b.0 }, value, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let value = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.iter().zip(tb.iter()).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul { a: a.0, b: b.0 }, value, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
        if tb.iter().any(|&v| v == 0.0) {
            return Err(AutodiffError::Domain { op: "div", detail: "division by zero".into() });
        }
        let value = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.iter().zip(tb.iter()).map(|(x, y)| x / y).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Div { a: a.0, b: b.0 }, value, ng))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        let ng = self.ng(x);
        self.push(Op::Neg { x: x.0 }, value, ng)
    }

    /// mul * x + add, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        let ng = self.ng(x);
        self.push(Op::Affine { x: x.0, mul }, value, ng)
    }

    pub fn pow_int(&mut self, x: Var, n: i32) -> Var {
        let value = self.value(x).map(|v| v.powi(n));
        let ng = self.ng(x);
        self.push(Op::PowInt { x: x.0, n }, value, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(Op::Exp { x: x.0 }, value, ng)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Domain { op: "ln", detail: "log of nonpositive value".into() });
        }
        let value = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        Ok(self.push(Op::Ln { x: x.0 }, value, ng))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sin);
        let ng = self.ng(x);
        self.push(Op::Sin { x: x.0 }, value, ng)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::cos);
        let ng = self.ng(x);
        self.push(Op::Cos { x: x.0 }, value, ng)
    }

    // ── Reductions and products ─────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).iter().sum());
        let ng = self.ng(x);
        self.push(Op::Sum { x: x.0 }, value, ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "dot shape mismatch");
        let value = Tensor::scalar(ta.iter().zip(tb.iter()).map(|(x, y)| x * y).sum());
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Dot { a: a.0, b: b.0 }, value, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul { a: a.0, b: b.0 }, value, ng)
    }

    /// a * b^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatmulNT { a: a.0, b: b.0 }, value, ng)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            out.push(t.row_slice(r).iter().sum());
        }
        let ng = self.ng(x);
        self.push(Op::RowSum { x: x.0 }, Tensor::col(out), ng)
    }

    /// Max-shifted log sum exp over all entries. Entries may be -inf as
    /// long as at least one is finite.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(AutodiffError::Domain { op: "logsumexp", detail: "empty input".into() });
        }
        if t.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(AutodiffError::Domain {
                op: "logsumexp",
                detail: "non-finite entry (nan or +inf)".into(),
            });
        }
        let value = Tensor::scalar(logsumexp_slice(t.data()).ok_or(AutodiffError::DegenerateLogSumExp)?);
        let ng = self.ng(x);
        Ok(self.push(Op::LogSumExp { x: x.0 }, value, ng))
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "max_elem shape mismatch");
        let value = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.iter().zip(tb.iter()).map(|(x, y)| x.max(*y)).collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MaxElem { a: a.0, b: b.0 }, value, ng)
    }

    // ── Structured / broadcast ops ──────────────────────────────────

    /// out[k, :] = x[idx[k], :].
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let ng = self.ng(x);
        self.push(
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
            Tensor::new(idx.len(), cols, data),
            ng,
        )
    }

    /// mat (KxN) + row (1xN), broadcast down the rows.
    pub fn add_row_bcast(&mut self, mat: Var, row: Var) -> Var {
        let (tm, tr) = (self.value(mat), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row_bcast: row must be 1xN");
        assert_eq!(tm.cols(), tr.cols(), "add_row_bcast width mismatch");
        let mut out = tm.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_slice_mut(r).iter_mut().zip(tr.data()) {
                *o += v;
            }
        }
        let ng = self.ng(mat) || self.ng(row);
        self.push(Op::AddRowBcast { mat: mat.0, row: row.0 }, out, ng)
    }

    /// mat (KxN) .* col (Kx1), broadcast across the columns.
    pub fn mul_col_bcast(&mut self, mat: Var, col: Var) -> Var {
        let (tm, tc) = (self.value(mat), self.value(col));
        assert_eq!(tc.cols(), 1, "mul_col_bcast: col must be Kx1");
        assert_eq!(tm.rows(), tc.rows(), "mul_col_bcast height mismatch");
        let mut out = tm.clone();
        for r in 0..out.rows() {
            let c = tc.data()[r];
            for o in out.row_slice_mut(r) {
                *o *= c;
            }
        }
        let ng = self.ng(mat) || self.ng(col);
        self.push(Op::MulColBcast { mat: mat.0, col: col.0 }, out, ng)
    }

    /// mat .* s for a scalar node s.
    pub fn mul_scalar_bcast(&mut self, mat: Var, s: Var) -> Var {
        let sv = self.value(s).scalar_value();
        let value = self.value(mat).map(|v| v * sv);
        let ng = self.ng(mat) || self.ng(s);
        self.push(Op::MulScalarBcast { mat: mat.0, s: s.0 }, value, ng)
    }

    /// mat - s for a scalar node s.
    pub fn sub_scalar_bcast(&mut self, mat: Var, s: Var) -> Var {
        let sv = self.value(s).scalar_value();
        let value = self.value(mat).map(|v| v - sv);
        let ng = self.ng(mat) || self.ng(s);
        self.push(Op::SubScalarBcast { mat: mat.0, s: s.0 }, value, ng)
    }

    /// x + constant tensor. The constant never receives gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), c.shape(), "add_const shape mismatch");
        let value = Tensor::new(
            t.rows(),
            t.cols(),
            t.iter().zip(c.iter()).map(|(a, b)| a + b).collect(),
        );
        let ng = self.ng(x);
        self.push(Op::AddConst { x: x.0 }, value, ng)
    }

    /// row - mat for a constant row, broadcast down the rows.
    pub fn sub_from_const_row(&mut self, row: &[f64], mat: Var) -> Var {
        let t = self.value(mat);
        assert_eq!(t.cols(), row.len(), "sub_from_const_row width mismatch");
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            for (o, (&c, &m)) in out.row_slice_mut(r).iter_mut().zip(row.iter().zip(t.row_slice(r))) {
                *o = c - m;
            }
        }
        let ng = self.ng(mat);
        self.push(Op::SubFromConstRow { mat: mat.0 }, out, ng)
    }

    /// Wraps angles into [-pi, pi] via atan2(sin x, cos x). The gradient
    /// passes through unchanged (the map has unit slope almost everywhere).
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sin().atan2(v.cos()));
        let ng = self.ng(x);
        self.push(Op::WrapAngle { x: x.0 }, value, ng)
    }

    /// Polynomial transition mean: monomials(x) * c^T.
    ///
    /// `x` is KxN (one state per row), `c` is PxM with one coefficient row
    /// per output dimension, and `exps` describes the M monomials.
    pub fn poly_mean(&mut self, x: Var, c: Var, exps: &Arc<Exponents>) -> Var {
        let (tx, tc) = (self.value(x), self.value(c));
        assert_eq!(tx.cols(), exps.vars(), "poly_mean: state width mismatch");
        assert_eq!(tc.cols(), exps.terms(), "poly_mean: coefficient width mismatch");
        let k = tx.rows();
        let p = tc.rows();
        let mut out = Tensor::zeros(k, p);
        let mut monoms = vec![0.0; exps.terms()];
        let mut powers = vec![0.0; exps.power_table_len()];
        for r in 0..k {
            exps.eval_into(tx.row_slice(r), &mut monoms, &mut powers);
            let o_row = out.row_slice_mut(r);
            for (pi, o) in o_row.iter_mut().enumerate() {
                let c_row = tc.row_slice(pi);
                let mut acc = 0.0;
                for (cv, mv) in c_row.iter().zip(&monoms) {
                    acc += cv * mv;
                }
                *o = acc;
            }
        }
        let ng = self.ng(x) || self.ng(c);
        self.push(Op::PolyMean { x: x.0, c: c.0, exps: Arc::clone(exps) }, out, ng)
    }

    /// out[k] = x[k,:] * inv * x[k,:]^T for a constant symmetric matrix.
    pub fn row_quad_form(&mut self, x: Var, inv: &Arc<Tensor>) -> Var {
        let t = self.value(x);
        assert_eq!(inv.rows(), inv.cols(), "row_quad_form: inv must be square");
        assert_eq!(t.cols(), inv.rows(), "row_quad_form width mismatch");
        let n = t.cols();
        let mut out = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let xr = t.row_slice(r);
            let mut acc = 0.0;
            for i in 0..n {
                let xi = xr[i];
                if xi == 0.0 {
                    continue;
                }
                let inv_row = inv.row_slice(i);
                let mut inner = 0.0;
                for (b, &xj) in inv_row.iter().zip(xr) {
                    inner += b * xj;
                }
                acc += xi * inner;
            }
            out.push(acc);
        }
        let ng = self.ng(x);
        self.push(Op::RowQuadForm { x: x.0, inv: Arc::clone(inv) }, Tensor::col(out), ng)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Returns the adjoints of every node
    /// reachable from the root through gradient-carrying edges.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(AutodiffError::NonScalarRoot { rows: rv.rows(), cols: rv.cols() });
        }
        self.backward_done = true;

        let mut adjoints: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[root.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;

        for i in (0..=root.0).rev() {
            let Some(g) = adjoints[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut adjoints);
            adjoints[i] = Some(g);
        }

        Ok(Gradients { adjoints, visited })
    }

    fn accum(&self, adjoints: &mut [Option<Tensor>], target: usize, delta: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut adjoints[target] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, adjoints: &mut [Option<Tensor>]) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad { .. } => {}
            Op::Add { a, b } => {
                self.accum(adjoints, *a, g.clone());
                self.accum(adjoints, *b, g.clone());
            }
            Op::AddN { xs } => {
                for &x in xs {
                    self.accum(adjoints, x, g.clone());
                }
            }
            Op::Sub { a, b } => {
                self.accum(adjoints, *a, g.clone());
                self.accum(adjoints, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(tb.iter()).map(|(x, y)| x * y).collect(),
                    );
                    self.accum(adjoints, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let db = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(ta.iter()).map(|(x, y)| x * y).collect(),
                    );
                    self.accum(adjoints, *b, db);
                }
            }
            Op::Div { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter().zip(tb.iter()).map(|(x, y)| x / y).collect(),
                    );
                    self.accum(adjoints, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let db = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter()
                            .zip(ta.iter().zip(tb.iter()))
                            .map(|(x, (n, d))| -x * n / (d * d))
                            .collect(),
                    );
                    self.accum(adjoints, *b, db);
                }
            }
            Op::Neg { x } => self.accum(adjoints, *x, g.map(|v| -v)),
            Op::Affine { x, mul } => {
                let m = *mul;
                self.accum(adjoints, *x, g.map(|v| m * v));
            }
            Op::PowInt { x, n } => {
                let n = *n;
                let tx = &self.nodes[*x].value;
                let dx = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.iter()
                        .zip(tx.iter())
                        .map(|(gv, xv)| gv * n as f64 * xv.powi(n - 1))
                        .collect(),
                );
                self.accum(adjoints, *x, dx);
            }
            Op::Exp { x } => {
                let v = &self.nodes[i].value;
                let dx = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.iter().zip(v.iter()).map(|(gv, ev)| gv * ev).collect(),
                );
                self.accum(adjoints, *x, dx);
            }
            Op::Ln { x } => {
                let tx = &self.nodes[*x].value;
                let dx = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.iter().zip(tx.iter()).map(|(gv, xv)| gv / xv).collect(),
                );
                self.accum(adjoints, *x, dx);
            }
            Op::Sin { x } => {
                let tx = &self.nodes[*x].value;
                let dx = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.iter().zip(tx.iter()).map(|(gv, xv)| gv * xv.cos()).collect(),
                );
                self.accum(adjoints, *x, dx);
            }
            Op::Cos { x } => {
                let tx = &self.nodes[*x].value;
                let dx = Tensor::new(
                    g.rows(),
                    g.cols(),
                    g.iter().zip(tx.iter()).map(|(gv, xv)| -gv * xv.sin()).collect(),
                );
                self.accum(adjoints, *x, dx);
            }
            Op::Sum { x } => {
                let gv = g.scalar_value();
                let (r, c) = self.nodes[*x].value.shape();
                self.accum(adjoints, *x, Tensor::new(r, c, vec![gv; r * c]));
            }
            Op::Dot { a, b } => {
                let gv = g.scalar_value();
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    self.accum(adjoints, *a, tb.map(|v| gv * v));
                }
                if self.nodes[*b].needs_grad {
                    self.accum(adjoints, *b, ta.map(|v| gv * v));
                }
            }
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    self.accum(adjoints, *a, g.matmul_nt(tb));
                }
                if self.nodes[*b].needs_grad {
                    self.accum(adjoints, *b, ta.matmul_tn(g));
                }
            }
            Op::MatmulNT { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    self.accum(adjoints, *a, g.matmul(tb));
                }
                if self.nodes[*b].needs_grad {
                    self.accum(adjoints, *b, g.matmul_tn(ta));
                }
            }
            Op::RowSum { x } => {
                let (r, c) = self.nodes[*x].value.shape();
                let mut dx = Tensor::zeros(r, c);
                for row in 0..r {
                    let gv = g.data()[row];
                    for v in dx.row_slice_mut(row) {
                        *v = gv;
                    }
                }
                self.accum(adjoints, *x, dx);
            }
            Op::LogSumExp { x } => {
                let gv = g.scalar_value();
                let tx = &self.nodes[*x].value;
                let lse = self.nodes[i].value.scalar_value();
                let dx = tx.map(|v| {
                    if v == f64::NEG_INFINITY {
                        0.0
                    } else {
                        gv * (v - lse).exp()
                    }
                });
                self.accum(adjoints, *x, dx);
            }
            Op::MaxElem { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let da = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter()
                            .zip(ta.iter().zip(tb.iter()))
                            .map(|(gv, (av, bv))| if av >= bv { *gv } else { 0.0 })
                            .collect(),
                    );
                    self.accum(adjoints, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let db = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.iter()
                            .zip(ta.iter().zip(tb.iter()))
                            .map(|(gv, (av, bv))| if bv > av { *gv } else { 0.0 })
                            .collect(),
                    );
                    self.accum(adjoints, *b, db);
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.nodes[*x].value.shape();
                let mut dx = Tensor::zeros(r, c);
                for (out_row, &src) in idx.iter().enumerate() {
                    let grow = g.row_slice(out_row);
                    for (d, gv) in dx.row_slice_mut(src).iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                self.accum(adjoints, *x, dx);
            }
            Op::AddRowBcast { mat, row } => {
                if self.nodes[*mat].needs_grad {
                    self.accum(adjoints, *mat, g.clone());
                }
                if self.nodes[*row].needs_grad {
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, gv) in dr.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *d += gv;
                        }
                    }
                    self.accum(adjoints, *row, dr);
                }
            }
            Op::MulColBcast { mat, col } => {
                let (tm, tc) = (&self.nodes[*mat].value, &self.nodes[*col].value);
                if self.nodes[*mat].needs_grad {
                    let mut dm = g.clone();
                    for r in 0..dm.rows() {
                        let cv = tc.data()[r];
                        for v in dm.row_slice_mut(r) {
                            *v *= cv;
                        }
                    }
                    self.accum(adjoints, *mat, dm);
                }
                if self.nodes[*col].needs_grad {
                    let mut dc = Vec::with_capacity(g.rows());
                    for r in 0..g.rows() {
                        let acc: f64 = g.row_slice(r).iter().zip(tm.row_slice(r)).map(|(a, b)| a * b).sum();
                        dc.push(acc);
                    }
                    self.accum(adjoints, *col, Tensor::col(dc));
                }
            }
            Op::MulScalarBcast { mat, s } => {
                let (tm, ts) = (&self.nodes[*mat].value, &self.nodes[*s].value);
                if self.nodes[*mat].needs_grad {
                    let sv = ts.scalar_value();
                    self.accum(adjoints, *mat, g.map(|v| v * sv));
                }
                if self.nodes[*s].needs_grad {
                    let acc: f64 = g.iter().zip(tm.iter()).map(|(a, b)| a * b).sum();
                    self.accum(adjoints, *s, Tensor::scalar(acc));
                }
            }
            Op::SubScalarBcast { mat, s } => {
                if self.nodes[*mat].needs_grad {
                    self.accum(adjoints, *mat, g.clone());
                }
                if self.nodes[*s].needs_grad {
                    let acc: f64 = g.iter().sum();
                    self.accum(adjoints, *s, Tensor::scalar(-acc));
                }
            }
            Op::AddConst { x } => self.accum(adjoints, *x, g.clone()),
            Op::SubFromConstRow { mat } => self.accum(adjoints, *mat, g.map(|v| -v)),
            Op::WrapAngle { x } => self.accum(adjoints, *x, g.clone()),
            Op::PolyMean { x, c, exps } => {
                let (tx, tc) = (&self.nodes[*x].value, &self.nodes[*c].value);
                let k = tx.rows();
                let m = exps.terms();
                let mut monoms = vec![0.0; m];
                let mut powers = vec![0.0; exps.power_table_len()];
                let grad_c = self.nodes[*c].needs_grad;
                let grad_x = self.nodes[*x].needs_grad;
                let mut dc = if grad_c { Some(Tensor::zeros(tc.rows(), m)) } else { None };
                let mut dx = if grad_x { Some(Tensor::zeros(k, tx.cols())) } else { None };
                let mut coeffs = vec![0.0; m];
                for r in 0..k {
                    let xr = tx.row_slice(r);
                    exps.eval_into(xr, &mut monoms, &mut powers);
                    let grow = g.row_slice(r);
                    if let Some(dc) = dc.as_mut() {
                        // dC[p, j] += g[r, p] * m_j
                        for (p, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &mv) in dc.row_slice_mut(p).iter_mut().zip(&monoms) {
                                *d += gv * mv;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        // coeffs[j] = sum_p g[r, p] * C[p, j]
                        coeffs.iter_mut().for_each(|v| *v = 0.0);
                        for (p, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (cf, &cv) in coeffs.iter_mut().zip(tc.row_slice(p)) {
                                *cf += gv * cv;
                            }
                        }
                        exps.accumulate_state_grad(xr, &monoms, &powers, &coeffs, dx.row_slice_mut(r));
                    }
                }
                if let Some(dc) = dc {
                    self.accum(adjoints, *c, dc);
                }
                if let Some(dx) = dx {
                    self.accum(adjoints, *x, dx);
                }
            }
            Op::RowQuadForm { x, inv } => {
                let tx = &self.nodes[*x].value;
                let n = tx.cols();
                let mut dx = Tensor::zeros(tx.rows(), n);
                for r in 0..tx.rows() {
                    let gv = g.data()[r];
                    if gv == 0.0 {
                        continue;
                    }
                    let xr = tx.row_slice(r);
                    let dr = dx.row_slice_mut(r);
                    // d/dx = 2 * inv * x for symmetric inv
                    for i2 in 0..n {
                        let mut acc = 0.0;
                        for (b, &xj) in inv.row_slice(i2).iter().zip(xr) {
                            acc += b * xj;
                        }
                        dr[i2] = 2.0 * gv * acc;
                    }
                }
                self.accum(adjoints, *x, dx);
            }
        }
    }
}

/// Max-shifted logsumexp of a slice. `None` when every entry is -inf.
pub fn logsumexp_slice(xs: &[f64]) -> Option<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = xs.iter().map(|&v| (v - max).exp()).sum();
    Some(max + sum.ln())
}
