//! Recovery of sparse polynomial transition dynamics for nonlinear
//! state-space models from noisy observations.
//!
//! The pipeline: simulate a synthetic system ([`systems`]), run a
//! stop-gradient differentiable particle filter over the observations
//! ([`filter`]) to obtain a Monte Carlo log-likelihood of the polynomial
//! coefficient matrix and its gradient ([`autodiff`], [`polymodel`]), and
//! optimise the coefficients with normalized gradient steps plus an L1
//! proximal update ([`optimizer`]). Support-recovery quality is scored in
//! [`metrics`], and [`cli`] wires everything into reproducible experiment
//! runs driven by config files.

pub mod autodiff;
pub mod cli;
pub mod filter;
pub mod metrics;
pub mod optimizer;
pub mod parallel;
pub mod polymodel;
pub mod systems;
