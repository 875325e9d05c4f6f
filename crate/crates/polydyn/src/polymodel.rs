//! Polynomial transition model: degree matrix construction, evaluation,
//! coefficient initialisation, and connectivity-graph extraction.
//!
//! A model is a pair (C, D): `D` is an `n_x x m` integer matrix whose column
//! j holds the exponent of each state variable in monomial j, and `C` is an
//! `n_x x m` real matrix of learnt coefficients. The transition mean at
//! state x is `sum_j C[:, j] * prod_i x_i^D[i, j]`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Exponents, Tape, Tensor, Var};

/// Absolute threshold under which a coefficient counts as numerically zero.
pub const ZERO_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum PolyError {
    #[error("monomial count overflows for n_x={n_x}, d={d}")]
    CountOverflow { n_x: usize, d: u32 },
    #[error("invalid model file: {0}")]
    BadFile(String),
}

/// Number of monomials in `n_x` variables of total degree at most `d`:
/// the sum over n = 0..=d of C(n + n_x - 1, n_x - 1).
pub fn monomial_count(n_x: usize, d: u32) -> Result<usize, PolyError> {
    let overflow = || PolyError::CountOverflow { n_x, d };
    let mut total: usize = 0;
    for n in 0..=d as usize {
        // C(n + n_x - 1, n_x - 1) = C(n + n_x - 1, n), built multiplicatively
        // as prod_{i=1..n} (n_x - 1 + i) / i, exact at every step.
        let mut c: usize = 1;
        for i in 1..=n {
            c = c.checked_mul(n_x - 1 + i).ok_or_else(overflow)? / i;
        }
        total = total.checked_add(c).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Visits every nondecreasing sequence of length `delta` over `0..n_x` in
/// lexicographic order (combinations with replacement).
fn for_each_cwr(n_x: usize, delta: usize, mut visit: impl FnMut(&[usize])) {
    let mut combo = vec![0usize; delta];
    loop {
        visit(&combo);
        let mut advanced = false;
        let mut pos = delta;
        while pos > 0 {
            pos -= 1;
            if combo[pos] + 1 < n_x {
                let v = combo[pos] + 1;
                for c in combo.iter_mut().skip(pos) {
                    *c = v;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
}

/// Exponent matrix for all monomials of degree <= d in n_x variables,
/// ordered ascending by total degree, lexicographic within equal degree.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeMatrix {
    n_x: usize,
    max_degree: u32,
    m: usize,
    exps: Arc<Exponents>,
}

impl DegreeMatrix {
    /// Enumerates, for each degree delta from 0 to d, every combination with
    /// replacement of the variable set, and counts occurrences per variable.
    pub fn generate(n_x: usize, d: u32) -> Result<Self, PolyError> {
        assert!(n_x >= 1, "need at least one state variable");
        let m = monomial_count(n_x, d)?;
        let mut exps = vec![0u32; n_x * m];
        let mut col = 0;
        for delta in 0..=d as usize {
            for_each_cwr(n_x, delta, |combo| {
                for &v in combo {
                    exps[v * m + col] += 1;
                }
                col += 1;
            });
        }
        debug_assert_eq!(col, m);
        Ok(DegreeMatrix {
            n_x,
            max_degree: d,
            m,
            exps: Arc::new(Exponents::new(n_x, m, exps)),
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    /// Number of monomials (columns).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Exponent of variable `i` in monomial `j`.
    pub fn power(&self, i: usize, j: usize) -> u32 {
        self.exps.power(i, j)
    }

    /// Row-major `n_x x m` exponent table.
    pub fn raw(&self) -> &[u32] {
        self.exps.raw()
    }

    pub fn exponents(&self) -> &Arc<Exponents> {
        &self.exps
    }
}

/// Learnt real coefficients, one row per state dimension, one column per
/// monomial.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    n_x: usize,
    m: usize,
    entries: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn zeros(n_x: usize, m: usize) -> Self {
        CoefficientMatrix { n_x, m, entries: vec![0.0; n_x * m] }
    }

    pub fn from_entries(n_x: usize, m: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), n_x * m, "coefficient entry count mismatch");
        CoefficientMatrix { n_x, m, entries }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.m + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.n_x, self.m, self.entries.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        CoefficientMatrix { n_x: t.rows(), m: t.cols(), entries: t.data().to_vec() }
    }

    /// Count of entries with magnitude above `tol`.
    pub fn nonzero_count(&self, tol: f64) -> usize {
        self.entries.iter().filter(|v| v.abs() > tol).count()
    }
}

/// I.i.d. Uniform(-1, 1) coefficients; reproducible from the RNG state.
pub fn init_coefficients(n_x: usize, m: usize, rng: &mut impl Rng) -> CoefficientMatrix {
    let entries = (0..n_x * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    CoefficientMatrix { n_x, m, entries }
}

/// Evaluates the polynomial transition mean at a single state.
pub fn eval_polynomial(x: &[f64], c: &CoefficientMatrix, d: &DegreeMatrix) -> Vec<f64> {
    assert_eq!(x.len(), d.n_x(), "state dimension mismatch");
    assert_eq!(c.m(), d.m(), "coefficient/degree column mismatch");
    let mut monoms = vec![0.0; d.m()];
    let mut powers = vec![0.0; d.exponents().power_table_len()];
    d.exponents().eval_into(x, &mut monoms, &mut powers);
    let mut out = vec![0.0; c.n_x()];
    for (i, o) in out.iter_mut().enumerate() {
        let row = c.row(i);
        let mut acc = 0.0;
        for (cv, mv) in row.iter().zip(&monoms) {
            acc += cv * mv;
        }
        *o = acc;
    }
    out
}

/// Tape-aware polynomial evaluation; `states` is KxN_x, `coeffs` N_xxM.
/// Differentiable with respect to both.
pub fn eval_polynomial_taped(tape: &mut Tape, states: Var, coeffs: Var, d: &DegreeMatrix) -> Var {
    tape.poly_mean(states, coeffs, d.exponents())
}

/// Binary state-interaction matrix: entry (a, b) is 1 when state b appears
/// in some monomial carrying a nonzero coefficient in row a.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n_x: usize,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> bool {
        self.entries[a * self.n_x + b] != 0
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().filter(|&&v| v != 0).count()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n_x).map(|a| self.entries[a * self.n_x..(a + 1) * self.n_x].to_vec()).collect()
    }

    /// Elementwise OR.
    pub fn union(&self, other: &AdjacencyMatrix) -> AdjacencyMatrix {
        assert_eq!(self.n_x, other.n_x);
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a | b).collect();
        AdjacencyMatrix { n_x: self.n_x, entries }
    }
}

/// A = 1_{!=0}(abs(C) D^T), with entries of C at or below `zero_tol` zeroed
/// first.
pub fn adjacency(c: &CoefficientMatrix, d: &DegreeMatrix, zero_tol: f64) -> AdjacencyMatrix {
    assert_eq!(c.m(), d.m(), "coefficient/degree column mismatch");
    assert_eq!(c.n_x(), d.n_x(), "coefficient/degree row mismatch");
    let n = c.n_x();
    let mut entries = vec![0u8; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for j in 0..c.m() {
                let cv = c.get(a, j);
                if cv.abs() > zero_tol {
                    acc += cv.abs() * d.power(b, j) as f64;
                }
            }
            entries[a * n + b] = u8::from(acc > zero_tol);
        }
    }
    AdjacencyMatrix { n_x: n, entries }
}

/// One graph per monomial: the j-th has adjacency 1_{!=0}(abs(C[:, j]) D[:, j]^T).
/// Their elementwise OR equals [`adjacency`].
pub fn per_monomial_graphs(
    c: &CoefficientMatrix,
    d: &DegreeMatrix,
    zero_tol: f64,
) -> Vec<AdjacencyMatrix> {
    let n = c.n_x();
    (0..c.m())
        .map(|j| {
            let mut entries = vec![0u8; n * n];
            for a in 0..n {
                if c.get(a, j).abs() <= zero_tol {
                    continue;
                }
                for b in 0..n {
                    if d.power(b, j) > 0 {
                        entries[a * n + b] = 1;
                    }
                }
            }
            AdjacencyMatrix { n_x: n, entries }
        })
        .collect()
}

/// DOT text for a connectivity graph: a directed edge b -> a for every
/// A[a][b] = 1 (state b drives state a).
pub fn to_dot(a: &AdjacencyMatrix) -> String {
    let mut out = String::from("digraph connectivity {\n");
    for i in 0..a.n_x() {
        out.push_str(&format!("  x{};\n", i + 1));
    }
    for row in 0..a.n_x() {
        for col in 0..a.n_x() {
            if a.get(row, col) {
                out.push_str(&format!("  x{} -> x{};\n", col + 1, row + 1));
            }
        }
    }
    out.push_str("}\n");
    out
}

/// On-disk JSON layout for a (C, D) pair.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub n_x: usize,
    pub d: u32,
    pub ordering: String,
    /// Row-major n_x x m exponent table.
    pub degrees: Vec<u32>,
    /// Row-major n_x x m coefficients.
    pub coefficients: Vec<f64>,
}

pub fn to_model_file(c: &CoefficientMatrix, d: &DegreeMatrix) -> ModelFile {
    ModelFile {
        n_x: d.n_x(),
        d: d.max_degree(),
        ordering: "deg-lex".to_string(),
        degrees: d.raw().to_vec(),
        coefficients: c.entries().to_vec(),
    }
}

pub fn from_model_file(f: &ModelFile) -> Result<(CoefficientMatrix, DegreeMatrix), PolyError> {
    if f.ordering != "deg-lex" {
        return Err(PolyError::BadFile(format!("unsupported ordering {:?}", f.ordering)));
    }
    let d = DegreeMatrix::generate(f.n_x, f.d)?;
    if f.degrees != d.raw() {
        return Err(PolyError::BadFile("degree table does not match deg-lex generation".into()));
    }
    if f.coefficients.len() != f.n_x * d.m() {
        return Err(PolyError::BadFile("coefficient length mismatch".into()));
    }
    Ok((CoefficientMatrix::from_entries(f.n_x, d.m(), f.coefficients.clone()), d))
}
