//! Synthetic ground-truth systems and dataset generation.
//!
//! Every generator is a pure function of its parameters and a seeded RNG.
//! Discretisation follows the Euler scheme x' = mean(x) + s * v with
//! s = sqrt(dt) when `scale_noise_by_sqrt_dt` is set, and the identity
//! observation model y = x + s * r throughout.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::Tensor;
use crate::polymodel::{eval_polynomial, CoefficientMatrix, DegreeMatrix};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("state diverged to a non-finite value at step {t}")]
    Diverged { t: usize },
    #[error("Lorenz 96 needs n_x >= 4, got {0}")]
    L96TooSmall(usize),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Poly(#[from] crate::polymodel::PolyError),
}

/// Noise covariance, either per-dimension variances or a dense PSD matrix.
#[derive(Debug, Clone)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Tensor),
}

impl Covariance {
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Covariance::Diagonal(vec![variance; dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Full(m) => m.rows(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Covariance::Diagonal(v) => v.iter().all(|&x| x == 0.0),
            Covariance::Full(m) => m.iter().all(|&x| x == 0.0),
        }
    }

    /// Covariance scaled by a positive factor (noise scaled by its sqrt).
    pub fn scaled(&self, factor: f64) -> Covariance {
        match self {
            Covariance::Diagonal(v) => Covariance::Diagonal(v.iter().map(|x| x * factor).collect()),
            Covariance::Full(m) => Covariance::Full(m.map(|x| x * factor)),
        }
    }

    /// Draws one N(0, Sigma) sample into `out`.
    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        match self {
            Covariance::Diagonal(v) => {
                for (o, &var) in out.iter_mut().zip(v) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = z * var.sqrt();
                }
            }
            Covariance::Full(m) => {
                let l = cholesky(m).expect("covariance must be PSD to sample");
                let z: Vec<f64> = (0..m.rows()).map(|_| StandardNormal.sample(rng)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &zj) in z.iter().enumerate().take(i + 1) {
                        acc += l.get(i, j) * zj;
                    }
                    *o = acc;
                }
            }
        }
    }

    /// Inverse as a dense matrix, for Gaussian quadratic forms.
    pub fn inverse(&self) -> Result<Tensor, SystemError> {
        match self {
            Covariance::Diagonal(v) => {
                if v.iter().any(|&x| x <= 0.0) {
                    return Err(SystemError::NotPositiveDefinite);
                }
                let n = v.len();
                let mut out = Tensor::zeros(n, n);
                for (i, &var) in v.iter().enumerate() {
                    out.set(i, i, 1.0 / var);
                }
                Ok(out)
            }
            Covariance::Full(m) => {
                let l = cholesky(m).ok_or(SystemError::NotPositiveDefinite)?;
                Ok(chol_inverse(&l))
            }
        }
    }

    /// log det of the covariance.
    pub fn log_det(&self) -> Result<f64, SystemError> {
        match self {
            Covariance::Diagonal(v) => {
                if v.iter().any(|&x| x <= 0.0) {
                    return Err(SystemError::NotPositiveDefinite);
                }
                Ok(v.iter().map(|x| x.ln()).sum())
            }
            Covariance::Full(m) => {
                let l = cholesky(m).ok_or(SystemError::NotPositiveDefinite)?;
                Ok(2.0 * (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>())
            }
        }
    }
}

/// Lower-triangular Cholesky factor, or None when not positive definite.
pub fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "cholesky needs a square matrix");
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Inverse of L L^T given the Cholesky factor L.
fn chol_inverse(l: &Tensor) -> Tensor {
    let n = l.rows();
    let mut inv = Tensor::zeros(n, n);
    let mut y = vec![0.0; n];
    for k in 0..n {
        // Forward solve L y = e_k.
        for i in 0..n {
            let mut acc = if i == k { 1.0 } else { 0.0 };
            for j in 0..i {
                acc -= l.get(i, j) * y[j];
            }
            y[i] = acc / l.get(i, i);
        }
        // Back solve L^T x = y.
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc -= l.get(j, i) * inv.get(j, k);
            }
            inv.set(i, k, acc / l.get(i, i));
        }
    }
    inv
}

/// Largest singular value via power iteration on C C^T.
pub fn max_singular_value(c: &CoefficientMatrix) -> f64 {
    let ct = c.to_tensor();
    let n = c.n_x();
    // Deterministic non-degenerate start.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma2 = 0.0;
    for _ in 0..300 {
        // w = C (C^T v)
        let mut inner = vec![0.0; c.m()];
        for (i, &vi) in v.iter().enumerate() {
            for (acc, &cv) in inner.iter_mut().zip(ct.row_slice(i)) {
                *acc += vi * cv;
            }
        }
        let mut w = vec![0.0; n];
        for (i, wi) in w.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&cv, &mv) in ct.row_slice(i).iter().zip(&inner) {
                acc += cv * mv;
            }
            *wi = acc;
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma2 = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    sigma2.sqrt()
}

/// Transition mean of a state-space model.
#[derive(Debug, Clone)]
pub enum TransitionKind {
    /// Mean is the polynomial itself (any Euler step is baked into C).
    Polynomial { coeffs: CoefficientMatrix, degrees: DegreeMatrix },
    /// Phase-coupled oscillators in mean-field form; mean is
    /// x + dt * (eta + coupling * (sbar cos x - cbar sin x)).
    Kuramoto { natural_rates: Vec<f64>, coupling: f64 },
}

impl TransitionKind {
    pub fn dim(&self) -> usize {
        match self {
            TransitionKind::Polynomial { coeffs, .. } => coeffs.n_x(),
            TransitionKind::Kuramoto { natural_rates, .. } => natural_rates.len(),
        }
    }

    pub fn mean_plain(&self, x: &[f64], dt: f64, out: &mut [f64]) {
        match self {
            TransitionKind::Polynomial { coeffs, degrees } => {
                out.copy_from_slice(&eval_polynomial(x, coeffs, degrees));
            }
            TransitionKind::Kuramoto { natural_rates, coupling } => {
                let n = x.len() as f64;
                let cbar = x.iter().map(|v| v.cos()).sum::<f64>() / n;
                let sbar = x.iter().map(|v| v.sin()).sum::<f64>() / n;
                for ((o, &xi), &eta) in out.iter_mut().zip(x).zip(natural_rates) {
                    let drift = eta + coupling * (sbar * xi.cos() - cbar * xi.sin());
                    *o = xi + dt * drift;
                }
            }
        }
    }
}

/// Full generative description of a state-space model instance.
#[derive(Debug, Clone)]
pub struct SsmSpec {
    pub transition: TransitionKind,
    pub state_noise: Covariance,
    pub obs_noise: Covariance,
    pub init_mean: Vec<f64>,
    pub init_cov: Covariance,
    pub dt: f64,
    /// Multiply noise draws by sqrt(dt), as in the experimental systems.
    pub scale_noise_by_sqrt_dt: bool,
    /// Keep states in [-pi, pi] and use angular observation residuals.
    pub wrap_phases: bool,
}

impl SsmSpec {
    pub fn dim(&self) -> usize {
        self.transition.dim()
    }

    /// Factor applied to covariance matrices (noise draws use its sqrt).
    pub fn noise_factor(&self) -> f64 {
        if self.scale_noise_by_sqrt_dt {
            self.dt
        } else {
            1.0
        }
    }

    pub fn effective_state_noise(&self) -> Covariance {
        self.state_noise.scaled(self.noise_factor())
    }

    pub fn effective_obs_noise(&self) -> Covariance {
        self.obs_noise.scaled(self.noise_factor())
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    x.sin().atan2(x.cos())
}

/// Simulated latent states and observations. `states` has T+1 rows
/// (including the initial state), `observations` T rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Euler simulation of `spec` for `horizon` steps.
pub fn simulate(
    spec: &SsmSpec,
    horizon: usize,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<Trajectory, SystemError> {
    let n = spec.dim();
    let sqrt_factor = spec.noise_factor().sqrt();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut observations = Vec::with_capacity(horizon);
    let mut x = spec.init_mean.clone();
    states.push(x.clone());
    let mut mean = vec![0.0; n];
    let mut noise = vec![0.0; n];
    for t in 1..=horizon {
        spec.transition.mean_plain(&x, spec.dt, &mut mean);
        spec.state_noise.sample_into(rng, &mut noise);
        for ((xi, &m), &v) in x.iter_mut().zip(&mean).zip(&noise) {
            *xi = m + sqrt_factor * v;
            if spec.wrap_phases {
                *xi = wrap_angle(*xi);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::Diverged { t });
        }
        spec.obs_noise.sample_into(rng, &mut noise);
        let y: Vec<f64> = x.iter().zip(&noise).map(|(&xi, &r)| xi + sqrt_factor * r).collect();
        states.push(x.clone());
        observations.push(y);
    }
    Ok(Trajectory { states, observations, seed })
}

/// Exact coefficient matrix of the Euler-discretised Lorenz 63 system,
/// paired with the degree-2 matrix in 3 variables. 7 of 30 entries are
/// nonzero.
pub fn lorenz63_truth(
    sigma: f64,
    rho: f64,
    beta: f64,
    dt: f64,
) -> (CoefficientMatrix, DegreeMatrix) {
    let d = DegreeMatrix::generate(3, 2).expect("small degree matrix");
    let mut c = CoefficientMatrix::zeros(3, d.m());
    // Columns in deg-lex order: 1, x1, x2, x3, x1^2, x1x2, x1x3, x2^2, x2x3, x3^2.
    c.set(0, 1, 1.0 - sigma * dt);
    c.set(0, 2, sigma * dt);
    c.set(1, 1, rho * dt);
    c.set(1, 2, 1.0 - dt);
    c.set(1, 6, -dt);
    c.set(2, 3, 1.0 - beta * dt);
    c.set(2, 5, dt);
    (c, d)
}

/// Column index of the degree-1 monomial x_a in deg-lex order.
fn linear_col(a: usize) -> usize {
    1 + a
}

/// Column index of the degree-2 monomial x_a x_b (any order) for n
/// variables in deg-lex order.
fn quad_col(n: usize, a: usize, b: usize) -> usize {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    1 + n + lo * n - lo * (lo + 1) / 2 + hi - lo
}

/// Exact coefficient matrix of the Euler-discretised Lorenz 96 system with
/// forcing `f`: row i carries f*dt on the constant, (1 - dt) on x_i, +dt on
/// x_{i-1} x_{i+1} and -dt on x_{i-1} x_{i-2}, indices wrapping mod n_x.
pub fn lorenz96_truth(
    n_x: usize,
    f: f64,
    dt: f64,
) -> Result<(CoefficientMatrix, DegreeMatrix), SystemError> {
    if n_x < 4 {
        return Err(SystemError::L96TooSmall(n_x));
    }
    let d = DegreeMatrix::generate(n_x, 2)?;
    let mut c = CoefficientMatrix::zeros(n_x, d.m());
    for i in 0..n_x {
        let im1 = (i + n_x - 1) % n_x;
        let im2 = (i + n_x - 2) % n_x;
        let ip1 = (i + 1) % n_x;
        c.set(i, 0, f * dt);
        c.set(i, linear_col(i), 1.0 - dt);
        c.set(i, quad_col(n_x, im1, ip1), dt);
        c.set(i, quad_col(n_x, im1, im2), -dt);
    }
    Ok((c, d))
}

/// Standard Lorenz 63 experiment spec: truth polynomial transition,
/// isotropic noise sigma^2 I scaled by sqrt(dt), x0 = [1, 0, 0], filter
/// prior N(x0, I).
pub fn lorenz63_spec(sigma2: f64, dt: f64) -> SsmSpec {
    let (c, d) = lorenz63_truth(10.0, 28.0, 8.0 / 3.0, dt);
    SsmSpec {
        transition: TransitionKind::Polynomial { coeffs: c, degrees: d },
        state_noise: Covariance::isotropic(3, sigma2),
        obs_noise: Covariance::isotropic(3, sigma2),
        init_mean: vec![1.0, 0.0, 0.0],
        init_cov: Covariance::isotropic(3, 1.0),
        dt,
        scale_noise_by_sqrt_dt: true,
        wrap_phases: false,
    }
}

/// Standard Lorenz 96 experiment spec with forcing `f`.
pub fn lorenz96_spec(n_x: usize, f: f64, sigma2: f64, dt: f64) -> Result<SsmSpec, SystemError> {
    let (c, d) = lorenz96_truth(n_x, f, dt)?;
    let mut init = vec![0.0; n_x];
    init[0] = 1.0;
    Ok(SsmSpec {
        transition: TransitionKind::Polynomial { coeffs: c, degrees: d },
        state_noise: Covariance::isotropic(n_x, sigma2),
        obs_noise: Covariance::isotropic(n_x, sigma2),
        init_mean: init,
        init_cov: Covariance::isotropic(n_x, 1.0),
        dt,
        scale_noise_by_sqrt_dt: true,
        wrap_phases: false,
    })
}

/// Kuramoto generation parameters.
#[derive(Debug, Clone)]
pub struct KuramotoParams {
    pub n_x: usize,
    pub coupling: f64,
    pub rate_mean: f64,
    pub rate_std: f64,
    pub dt: f64,
    pub sigma: f64,
    pub burn_in_time: f64,
    pub init_cov: f64,
}

impl Default for KuramotoParams {
    fn default() -> Self {
        KuramotoParams {
            n_x: 20,
            coupling: 0.8,
            rate_mean: 0.5,
            rate_std: 0.5,
            dt: 0.05,
            sigma: 0.1,
            burn_in_time: 10.0,
            init_cov: 0.2,
        }
    }
}

/// Mean resultant length of a set of phases (1 = fully synchronised).
pub fn order_parameter(phases: &[f64]) -> f64 {
    let n = phases.len() as f64;
    let c = phases.iter().map(|v| v.cos()).sum::<f64>() / n;
    let s = phases.iter().map(|v| v.sin()).sum::<f64>() / n;
    (c * c + s * s).sqrt()
}

/// Simulates a Kuramoto oscillator network: natural rates are drawn from
/// N(rate_mean, rate_std^2), initial phases from U(-pi, pi), and the system
/// runs for `burn_in_time` before observations are collected. The returned
/// spec has `init_mean` set to the post-burn-in state so a filter prior can
/// be centred there.
pub fn kuramoto_simulate(
    params: &KuramotoParams,
    horizon: usize,
    rng: &mut impl Rng,
    seed: u64,
) -> Result<(SsmSpec, Trajectory), SystemError> {
    let n = params.n_x;
    let rate_dist = Normal::new(params.rate_mean, params.rate_std).expect("valid rate std");
    let rates: Vec<f64> = (0..n).map(|_| rate_dist.sample(rng)).collect();
    let phases: Vec<f64> =
        (0..n).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
    let mut spec = SsmSpec {
        transition: TransitionKind::Kuramoto { natural_rates: rates, coupling: params.coupling },
        state_noise: Covariance::isotropic(n, params.sigma * params.sigma),
        obs_noise: Covariance::isotropic(n, params.sigma * params.sigma),
        init_mean: phases,
        init_cov: Covariance::isotropic(n, params.init_cov),
        dt: params.dt,
        scale_noise_by_sqrt_dt: true,
        wrap_phases: true,
    };
    let burn_steps = (params.burn_in_time / params.dt).round() as usize;
    let warmup = simulate(&spec, burn_steps, rng, seed)?;
    spec.init_mean = warmup.states.last().expect("burn-in produced states").clone();
    let trajectory = simulate(&spec, horizon, rng, seed)?;
    Ok((spec, trajectory))
}

/// A random sparse polynomial system for penalty tuning: the coefficient
/// matrix has round((1 - sparsity) n_x m) nonzero entries at uniform random
/// positions, values U(-n_x, n_x), rescaled so its largest singular value
/// is 1. State and observation covariances are dt * I.
pub fn random_sparse_system(
    n_x: usize,
    d: u32,
    sparsity: f64,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<(SsmSpec, CoefficientMatrix, DegreeMatrix), SystemError> {
    assert!((0.0..1.0).contains(&sparsity), "sparsity must be in [0, 1)");
    let dm = DegreeMatrix::generate(n_x, d)?;
    let m = dm.m();
    let total = n_x * m;
    let nnz = ((1.0 - sparsity) * total as f64).round() as usize;
    // Partial Fisher-Yates over entry indices.
    let mut indices: Vec<usize> = (0..total).collect();
    for i in 0..nnz {
        let j = rng.gen_range(i..total);
        indices.swap(i, j);
    }
    let mut entries = vec![0.0; total];
    let bound = n_x as f64;
    for &idx in &indices[..nnz] {
        entries[idx] = rng.gen_range(-bound..bound);
    }
    let mut c = CoefficientMatrix::from_entries(n_x, m, entries);
    let sv = max_singular_value(&c);
    if sv > 0.0 {
        for v in c.entries_mut() {
            *v /= sv;
        }
    }
    let spec = SsmSpec {
        transition: TransitionKind::Polynomial { coeffs: c.clone(), degrees: dm.clone() },
        state_noise: Covariance::isotropic(n_x, dt),
        obs_noise: Covariance::isotropic(n_x, dt),
        init_mean: vec![0.0; n_x],
        init_cov: Covariance::isotropic(n_x, 1.0),
        dt,
        scale_noise_by_sqrt_dt: false,
        wrap_phases: false,
    };
    Ok((spec, c, dm))
}

/// Writes a trajectory as CSV with header t, x_1..x_n, y_1..y_n. The t = 0
/// row has no observation; its y fields are left empty.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let n = traj.states[0].len();
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",y_{i}"));
    }
    out.push('\n');
    for (t, state) in traj.states.iter().enumerate() {
        out.push_str(&t.to_string());
        for v in state {
            out.push_str(&format!(",{v}"));
        }
        if t == 0 {
            for _ in 0..n {
                out.push(',');
            }
        } else {
            for v in &traj.observations[t - 1] {
                out.push_str(&format!(",{v}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV layout written by [`trajectory_to_csv`].
pub fn trajectory_from_csv(text: &str, seed: u64) -> Result<Trajectory, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trajectory file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || (cols.len() - 1) % 2 != 0 {
        return Err(format!("unexpected trajectory header {header:?}"));
    }
    let n = (cols.len() - 1) / 2;
    let mut states = Vec::new();
    let mut observations = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 * n + 1 {
            return Err(format!("row {row}: expected {} fields, got {}", 2 * n + 1, fields.len()));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("row {row}: {e}"));
        let state: Vec<f64> = fields[1..=n].iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
        states.push(state);
        if row > 0 {
            let obs: Vec<f64> =
                fields[n + 1..].iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
            observations.push(obs);
        }
    }
    Ok(Trajectory { states, observations, seed })
}
