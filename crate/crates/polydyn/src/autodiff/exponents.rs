//! Exponent tables for monomial evaluation.
//!
//! An [`Exponents`] value describes `terms` monomials in `vars` variables.
//! It is the tape-level view of a degree matrix: plain integer data plus a
//! sparse per-term factor list so evaluation skips zero exponents.

/// Integer exponent table for a family of monomials.
#[derive(Debug, Clone, PartialEq)]
pub struct Exponents {
    vars: usize,
    terms: usize,
    /// Row-major `vars x terms`: `exps[i * terms + j]` is the power of
    /// variable `i` in term `j`.
    exps: Vec<u32>,
    /// Per-term list of `(variable, power)` with power > 0.
    sparse: Vec<Vec<(u32, u32)>>,
    max_power: u32,
}

impl Exponents {
    pub fn new(vars: usize, terms: usize, exps: Vec<u32>) -> Self {
        assert_eq!(exps.len(), vars * terms, "exponent table shape mismatch");
        let mut sparse = vec![Vec::new(); terms];
        let mut max_power = 0;
        for i in 0..vars {
            for j in 0..terms {
                let e = exps[i * terms + j];
                if e > 0 {
                    sparse[j].push((i as u32, e));
                    max_power = max_power.max(e);
                }
            }
        }
        Exponents { vars, terms, exps, sparse, max_power }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn power(&self, var: usize, term: usize) -> u32 {
        self.exps[var * self.terms + term]
    }

    pub fn raw(&self) -> &[u32] {
        &self.exps
    }

    /// Fills `powers` with `x_i^e` for `e = 0..=max_power`, one row per variable.
    fn fill_power_table(&self, x: &[f64], powers: &mut [f64]) {
        let width = self.max_power as usize + 1;
        for (i, &xi) in x.iter().enumerate() {
            let row = &mut powers[i * width..(i + 1) * width];
            row[0] = 1.0;
            for e in 1..width {
                row[e] = row[e - 1] * xi;
            }
        }
    }

    /// Evaluates every monomial at `x`, writing into `out` (length `terms`).
    /// Uses the convention 0^0 = 1 so the constant term is always 1.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64], powers: &mut [f64]) {
        debug_assert_eq!(x.len(), self.vars);
        debug_assert_eq!(out.len(), self.terms);
        self.fill_power_table(x, powers);
        let width = self.max_power as usize + 1;
        for (j, factors) in self.sparse.iter().enumerate() {
            let mut m = 1.0;
            for &(i, e) in factors {
                m *= powers[i as usize * width + e as usize];
            }
            out[j] = m;
        }
    }

    /// Scratch length needed by `eval_into` / `accumulate_state_grad`.
    pub fn power_table_len(&self) -> usize {
        self.vars * (self.max_power as usize + 1)
    }

    /// Partial derivative of term `j` with respect to variable `i`, given the
    /// power table for the current state and the evaluated monomial value.
    fn term_grad(&self, j: usize, var: u32, exp: u32, mj: f64, x: &[f64], powers: &[f64]) -> f64 {
        let xi = x[var as usize];
        if xi != 0.0 {
            exp as f64 * mj / xi
        } else if exp == 1 {
            // Recompute the product excluding the vanished factor.
            let width = self.max_power as usize + 1;
            let mut m = 1.0;
            for &(i2, e2) in &self.sparse[j] {
                if i2 != var {
                    m *= powers[i2 as usize * width + e2 as usize];
                }
            }
            m
        } else {
            0.0
        }
    }

    /// Accumulates `coeffs[j] * d m_j / d x_i` into `grad_x` for one state row.
    /// `monoms` must hold the monomial values at `x`, `powers` the power table.
    pub fn accumulate_state_grad(
        &self,
        x: &[f64],
        monoms: &[f64],
        powers: &[f64],
        coeffs: &[f64],
        grad_x: &mut [f64],
    ) {
        for (j, factors) in self.sparse.iter().enumerate() {
            let cj = coeffs[j];
            if cj == 0.0 {
                continue;
            }
            for &(i, e) in factors {
                grad_x[i as usize] += cj * self.term_grad(j, i, e, monoms[j], x, powers);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Terms: 1, x0, x1, x0^2, x0*x1  (vars = 2)
    fn sample() -> Exponents {
        Exponents::new(2, 5, vec![0, 1, 0, 2, 1, 0, 0, 1, 0, 1])
    }

    #[test]
    fn eval_basic() {
        let e = sample();
        let mut out = vec![0.0; 5];
        let mut pow = vec![0.0; e.power_table_len()];
        e.eval_into(&[2.0, 3.0], &mut out, &mut pow);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_to_zero_is_one() {
        let e = sample();
        let mut out = vec![0.0; 5];
        let mut pow = vec![0.0; e.power_table_len()];
        e.eval_into(&[0.0, 0.0], &mut out, &mut pow);
        assert_eq!(out, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn state_grad_at_zero_base() {
        // d/dx0 of [1, x0, x1, x0^2, x0 x1] at x = (0, 3) is [0, 1, 0, 0, 3].
        let e = sample();
        let x = [0.0, 3.0];
        let mut monoms = vec![0.0; 5];
        let mut pow = vec![0.0; e.power_table_len()];
        e.eval_into(&x, &mut monoms, &mut pow);
        let mut grad = vec![0.0; 2];
        e.accumulate_state_grad(&x, &monoms, &pow, &[0.0, 1.0, 0.0, 0.0, 0.0], &mut grad);
        assert_eq!(grad, vec![1.0, 0.0]);
        let mut grad2 = vec![0.0; 2];
        e.accumulate_state_grad(&x, &monoms, &pow, &[0.0, 0.0, 0.0, 0.0, 1.0], &mut grad2);
        assert_eq!(grad2, vec![3.0, 0.0]);
    }
}
