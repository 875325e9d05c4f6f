//! Minimal reverse-mode autodiff with a stop-gradient operator.
//!
//! Scope is deliberately narrow: exactly the op set needed to differentiate
//! a particle-filter log-likelihood with respect to a coefficient matrix.
//! No broadcasting rules beyond the explicit broadcast ops, no higher-order
//! derivatives, no GPU.

mod exponents;
mod tape;
mod tensor;

pub use exponents::Exponents;
pub use tape::{logsumexp_slice, AutodiffError, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v), true)
    }

    #[test]
    fn leaf_construction() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        assert_eq!(tape.value(x).scalar_value(), 3.0);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), false);
        let y = tape.sum(x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.grad(x).is_none());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 5.0);
        let y = tape.stop_gradient(x);
        assert_eq!(tape.value(y).scalar_value(), 5.0);
        let grads = tape.backward(y).unwrap();
        assert!(grads.grad(x).is_none());
    }

    #[test]
    fn stop_gradient_partial_product() {
        // y = x * stop(x) at x = 2: dy/dx = stop(x) = 2.
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let frozen = tape.stop_gradient(x);
        let y = tape.mul(x, frozen);
        assert_eq!(tape.value(y).scalar_value(), 4.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(x).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn carry_weight_value_and_gradient() {
        // w_tilde = (1/K) * w / stop(w): value 1/K, d w_tilde / d w = (1/K) / stop(w).
        let k = 4.0;
        let w_val = 0.3;
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, w_val);
        let frozen = tape.stop_gradient(w);
        let ratio = tape.div(w, frozen).unwrap();
        let w_tilde = tape.affine(ratio, 1.0 / k, 0.0);
        assert_eq!(tape.value(w_tilde).scalar_value(), 1.0 / k);
        let grads = tape.backward(w_tilde).unwrap();
        let g = grads.grad(w).unwrap().scalar_value();
        assert!((g - (1.0 / k) / w_val).abs() < 1e-15);
    }

    #[test]
    fn mul_adjoints() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 2.0);
        let b = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(a, b);
        assert_eq!(tape.value(y).scalar_value(), 6.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(a).unwrap().scalar_value(), 3.0);
        assert_eq!(grads.grad(b).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn pow_int_rule() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 2.0);
        let y = tape.pow_int(x, 3);
        assert_eq!(tape.value(y).scalar_value(), 8.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(x).unwrap().scalar_value(), 12.0);
    }

    #[test]
    fn log_exp_inverse_pair() {
        for &v in &[-3.0, 0.0, 1.7, 40.0] {
            let mut tape = Tape::new();
            let x = scalar_leaf(&mut tape, v);
            let e = tape.exp(x);
            let y = tape.ln(e).unwrap();
            let grads = tape.backward(y).unwrap();
            assert!((grads.grad(x).unwrap().scalar_value() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_nonpositive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0), true);
        assert!(matches!(tape.ln(x), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut tape = Tape::new();
        let a = scalar_leaf(&mut tape, 1.0);
        let b = tape.leaf(Tensor::scalar(0.0), true);
        assert!(matches!(tape.div(a, b), Err(AutodiffError::Domain { .. })));
    }

    #[test]
    fn logsumexp_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![0.0, 0.0]), true);
        let y = tape.logsumexp(x).unwrap();
        assert!((tape.value(y).scalar_value() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_large_inputs_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1000.0, 1000.0]), true);
        let y = tape.logsumexp(x).unwrap();
        assert!((tape.value(y).scalar_value() - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_symmetric_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![3.5, 3.5]), true);
        let y = tape.logsumexp(x).unwrap();
        let grads = tape.backward(y).unwrap();
        let g = grads.grad(x).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-12);
        assert!((g.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_all_neg_inf_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![f64::NEG_INFINITY, f64::NEG_INFINITY]), true);
        assert!(matches!(tape.logsumexp(x), Err(AutodiffError::DegenerateLogSumExp)));
    }

    #[test]
    fn logsumexp_gradient_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![-2.0, 0.3, 5.0, 1.1]), true);
        let y = tape.logsumexp(x).unwrap();
        let grads = tape.backward(y).unwrap();
        let s: f64 = grads.grad(x).unwrap().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_on_square() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.pow_int(x, 2);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(x).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = scalar_leaf(&mut tape, 3.0);
        let y = tape.pow_int(x, 2);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(AutodiffError::BackwardTwice)));
    }

    #[test]
    fn backward_non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn backward_visits_at_most_node_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]), true);
        let a = tape.pow_int(x, 2);
        let b = tape.exp(x);
        let c = tape.add(a, b);
        let y = tape.sum(c);
        let n_forward = tape.node_count();
        let grads = tape.backward(y).unwrap();
        assert!(grads.visited() <= 4 * n_forward);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let g = tape.gather_rows(x, &[0, 0, 2]);
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn wrap_angle_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![4.0, -4.0, 0.5]), true);
        let w = tape.wrap_angle(x);
        let vals = tape.value(w).data().to_vec();
        assert!((vals[0] - (4.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((vals[1] - (-4.0 + 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert!((vals[2] - 0.5).abs() < 1e-12);
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    /// Forward values must be identical whether or not gradients are enabled.
    #[test]
    fn values_identical_with_and_without_grad() {
        let build = |requires_grad: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::row(vec![0.3, -1.2, 2.4]), requires_grad);
            let s = tape.stop_gradient(x);
            let p = tape.mul(x, s);
            let e = tape.exp(p);
            let l = tape.logsumexp(e).unwrap();
            vec![tape.value(l).scalar_value()]
        };
        let with_grad = build(true);
        let without = build(false);
        assert_eq!(with_grad[0].to_bits(), without[0].to_bits());
    }

    // ── Finite-difference checks for every differentiable op ─────────

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += eps;
            lo[i] -= eps;
            g.push((f(&hi) - f(&lo)) / (2.0 * eps));
        }
        g
    }

    fn check_grad(build: impl Fn(&mut Tape, Var) -> Var, x0: &[f64], rows: usize, cols: usize) {
        let f = |xs: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(rows, cols, xs.to_vec()), true);
            let y = build(&mut tape, x);
            tape.value(y).scalar_value()
        };
        let fd = central_diff(f, x0, 1e-5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(rows, cols, x0.to_vec()), true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y).unwrap();
        let ad = grads.grad_or_zeros(x, rows, cols);
        for (i, (&a, &n)) in ad.iter().zip(&fd).enumerate() {
            let denom = n.abs().max(1e-8);
            assert!(
                (a - n).abs() / denom < 1e-4,
                "entry {i}: ad={a} fd={n}"
            );
        }
    }

    #[test]
    fn fd_elementary_ops() {
        let x0 = [0.7, -0.4, 1.3];
        check_grad(|t, x| { let y = t.pow_int(x, 3); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| { let y = t.exp(x); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| { let y = t.sin(x); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| { let y = t.cos(x); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| { let y = t.neg(x); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| { let y = t.affine(x, 2.5, -0.3); t.sum(y) }, &x0, 1, 3);
        check_grad(|t, x| t.logsumexp(x).unwrap(), &x0, 1, 3);
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::row(vec![0.6, -1.0, 0.2]));
                let m = t.mul(x, c);
                t.sum(m)
            },
            &x0,
            1,
            3,
        );
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::row(vec![0.6, -1.0, 0.2]));
                let m = t.div(x, c).unwrap();
                t.sum(m)
            },
            &x0,
            1,
            3,
        );
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::row(vec![0.6, -0.3, 1.2]));
                let m = t.max_elem(x, c);
                t.sum(m)
            },
            &x0,
            1,
            3,
        );
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::row(vec![0.5, 2.0, -1.5]));
                t.dot(x, c)
            },
            &x0,
            1,
            3,
        );
        let pos = [0.7, 0.4, 1.3];
        check_grad(|t, x| { let y = t.ln(x).unwrap(); t.sum(y) }, &pos, 1, 3);
    }

    #[test]
    fn fd_matrix_ops() {
        let x0 = [0.7, -0.4, 1.3, 0.2, -1.1, 0.5];
        check_grad(
            |t, x| {
                let b = t.constant(Tensor::new(3, 2, vec![1.0, 0.5, -0.5, 2.0, 0.3, -1.0]));
                let y = t.matmul(x, b);
                t.sum(y)
            },
            &x0,
            2,
            3,
        );
        check_grad(
            |t, x| {
                let b = t.constant(Tensor::new(2, 3, vec![1.0, 0.5, -0.5, 2.0, 0.3, -1.0]));
                let y = t.matmul_nt(x, b);
                t.sum(y)
            },
            &x0,
            2,
            3,
        );
        check_grad(
            |t, x| {
                let y = t.row_sum(x);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &x0,
            2,
            3,
        );
        check_grad(
            |t, x| {
                let inv = Arc::new(Tensor::new(3, 3, vec![2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 1.5]));
                let q = t.row_quad_form(x, &inv);
                t.sum(q)
            },
            &x0,
            2,
            3,
        );
    }

    #[test]
    fn fd_poly_mean_wrt_states_and_coeffs() {
        // Monomials in 2 vars up to the ones a degree-2 model uses.
        let exps = Arc::new(Exponents::new(2, 5, vec![0, 1, 0, 2, 1, 0, 0, 1, 0, 1]));
        let c_data = vec![0.4, -0.2, 0.9, 0.1, -0.7, 0.3, 0.8, -0.5, 0.2, 0.6];
        let x0 = [0.7, -0.4, 1.3, 0.2];

        // Gradient with respect to states.
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::new(2, 5, c_data.clone()));
                let y = t.poly_mean(x, c, &exps);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &x0,
            2,
            2,
        );

        // Gradient with respect to coefficients.
        let x_data = vec![0.7, -0.4, 1.3, 0.2];
        check_grad(
            |t, c| {
                let x = t.constant(Tensor::new(2, 2, x_data.clone()));
                let y = t.poly_mean(x, c, &exps);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &c_data,
            2,
            5,
        );
    }

    #[test]
    fn fd_poly_mean_states_containing_zero() {
        let exps = Arc::new(Exponents::new(2, 5, vec![0, 1, 0, 2, 1, 0, 0, 1, 0, 1]));
        let c_data = vec![0.4, -0.2, 0.9, 0.1, -0.7, 0.3, 0.8, -0.5, 0.2, 0.6];
        // Zero entries exercise the 0^0 = 1 convention in the backward pass.
        // Finite differences straddle the zero, which is fine for this
        // polynomial since it is smooth there.
        check_grad(
            |t, x| {
                let c = t.constant(Tensor::new(2, 5, c_data.clone()));
                let y = t.poly_mean(x, c, &exps);
                t.sum(y)
            },
            &[0.0, 1.2],
            1,
            2,
        );
    }

    #[test]
    fn fd_broadcast_ops() {
        let x0 = [0.7, -0.4, 1.3, 0.2, -1.1, 0.5];
        check_grad(
            |t, x| {
                let row = t.constant(Tensor::row(vec![0.3, -0.6, 1.1]));
                let y = t.add_row_bcast(x, row);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &x0,
            2,
            3,
        );
        check_grad(
            |t, x| {
                let col = t.constant(Tensor::col(vec![0.5, -1.2]));
                let y = t.mul_col_bcast(x, col);
                t.sum(y)
            },
            &x0,
            2,
            3,
        );
        check_grad(
            |t, x| {
                let y = t.sub_from_const_row(&[0.1, 0.2, 0.3], x);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &x0,
            2,
            3,
        );
        // Gradient through the broadcast scalar itself.
        check_grad(
            |t, s| {
                let m = t.constant(Tensor::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]));
                let y = t.mul_scalar_bcast(m, s);
                t.sum(y)
            },
            &[0.8],
            1,
            1,
        );
        check_grad(
            |t, s| {
                let m = t.constant(Tensor::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]));
                let y = t.sub_scalar_bcast(m, s);
                let z = t.pow_int(y, 2);
                t.sum(z)
            },
            &[0.8],
            1,
            1,
        );
    }
}
