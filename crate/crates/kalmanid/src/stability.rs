//! Discrete Lyapunov machinery for the stability-constrained feasible set.
//!
//! A gain L belongs to the feasible set when the certificate
//! P = (A - LC) P (A - LC)^T + I exists and alpha * tr(P - I) <= 1. The
//! certificate also yields explicit uniform-stability bounds
//! ||(A - LC)^i|| <= gamma * lambda^i with gamma = sqrt(1 + 1/alpha) and
//! lambda = 1/sqrt(1 + alpha).

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::riccati;

/// Constraint satisfied when g <= this slack.
pub const FEASIBILITY_SLACK: f64 = 1e-12;
/// Margin below 1 required of the spectral radius.
pub const STABILITY_MARGIN: f64 = 1e-12;

/// Lyapunov certificate with the derived uniform-stability constants.
#[derive(Debug, Clone)]
pub struct StabilityCert {
    pub p: DMatrix<f64>,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Operator 2-norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Solves P = M P M^T + Q by the n^2 x n^2 Kronecker linear system, then
/// symmetrizes. Requires rho(M) < 1.
pub fn solve_dlyap(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch("dlyap needs square M and Q of equal size".into()));
    }
    let rho = spectral_radius(m);
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(Error::UnstableMatrix { rho });
    }
    // vec(P) - (M ⊗ M) vec(P) = vec(Q), column-major vec.
    let kron = m.kronecker(m);
    let system = DMatrix::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let vec_p = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::UnstableMatrix { rho })?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Value of alpha * tr(P - I) - 1 for the certificate of M = A - LC.
fn constraint_of(p: &DMatrix<f64>, alpha: f64) -> f64 {
    alpha * (p.trace() - p.nrows() as f64) - 1.0
}

/// Feasibility of a gain: stable A - LC and alpha * tr(P - I) <= 1.
pub enum Membership {
    Feasible { p: DMatrix<f64> },
    Unstable { rho: f64 },
    TraceExceeded { g: f64 },
}

impl Membership {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Membership::Feasible { .. })
    }
}

pub fn membership(gain: &DMatrix<f64>, plant: &StateSpaceModel, alpha: f64) -> Result<Membership> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("alpha must be positive".into()));
    }
    let m = &plant.a - gain * &plant.c;
    let rho = spectral_radius(&m);
    if rho >= 1.0 - STABILITY_MARGIN {
        return Ok(Membership::Unstable { rho });
    }
    let p = solve_dlyap(&m, &DMatrix::identity(m.nrows(), m.nrows()))?;
    let g = constraint_of(&p, alpha);
    if g <= FEASIBILITY_SLACK {
        Ok(Membership::Feasible { p })
    } else {
        Ok(Membership::TraceExceeded { g })
    }
}

/// Constraint value g = alpha * tr(P - I) - 1 and its gradient in L.
///
/// The gradient comes from an adjoint Lyapunov solve Λ = M^T Λ M + I:
/// grad_g = -2 alpha Λ M P C^T with M = A - LC.
pub fn constraint_value_grad(
    gain: &DMatrix<f64>,
    plant: &StateSpaceModel,
    alpha: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let m = &plant.a - gain * &plant.c;
    let n = m.nrows();
    let p = solve_dlyap(&m, &DMatrix::identity(n, n))?;
    let g = constraint_of(&p, alpha);
    let adjoint = solve_dlyap(&m.transpose(), &DMatrix::identity(n, n))?;
    let grad = &adjoint * &m * &p * plant.c.transpose() * (-2.0 * alpha);
    Ok((g, grad))
}

/// Uniform-stability constants for the feasible set at level alpha.
pub fn stability_bounds(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("alpha must be positive".into()));
    }
    Ok(((1.0 + 1.0 / alpha).sqrt(), 1.0 / (1.0 + alpha).sqrt()))
}

/// Checks ||(A - LC)^i|| <= gamma * lambda^i for i = 1..=i_max.
pub fn verify_uniform_stability(
    gain: &DMatrix<f64>,
    plant: &StateSpaceModel,
    gamma: f64,
    lambda: f64,
    i_max: usize,
) -> bool {
    let m = &plant.a - gain * &plant.c;
    let mut power = m.clone();
    let mut bound = gamma;
    for _ in 1..=i_max {
        bound *= lambda;
        if operator_norm(&power) > bound {
            return false;
        }
        power = &power * &m;
    }
    true
}

/// Draws a feasible gain as the Kalman gain of the plant for random SPD
/// covariances Q = GG^T + 1e-6 I and R = HH^T + 1e-6 I, retrying until
/// membership holds.
pub fn sample_feasible_gain(
    plant: &StateSpaceModel,
    alpha: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    const MAX_RETRIES: usize = 1000;
    let n = plant.state_dim();
    let q_dim = plant.output_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let g = DMatrix::from_fn(n, n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let h = DMatrix::from_fn(q_dim, q_dim, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        // A random log-scale on R spans slow to aggressive observers, so the
        // sampled gains cover a range of contraction (and trace) levels.
        let r_scale = 10f64.powf(4.0 * rand::Rng::gen::<f64>(&mut rng) - 3.0);
        let q_cov = &g * g.transpose() + DMatrix::identity(n, n) * 1e-6;
        let r_cov = (&h * h.transpose() + DMatrix::identity(q_dim, q_dim) * 1e-6) * r_scale;
        let Ok(sol) = riccati::solve_dare(&plant.a, &plant.c, &q_cov, &r_cov) else {
            continue;
        };
        if membership(&sol.l_star, plant, alpha)?.is_feasible() {
            return Ok(sol.l_star);
        }
    }
    Err(Error::FeasibleSampleExhausted { retries: MAX_RETRIES })
}

/// Rejection sampling uniform in the box [lo, hi]^(n*q) intersected with
/// the feasible set.
pub fn sample_feasible_gain_box(
    plant: &StateSpaceModel,
    alpha: f64,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    const MAX_RETRIES: usize = 10_000;
    let n = plant.state_dim();
    let q = plant.output_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let l = DMatrix::from_fn(n, q, |_, _| {
            let t: f64 = rand::Rng::gen(&mut rng);
            lo + t * (hi - lo)
        });
        if membership(&l, plant, alpha)?.is_feasible() {
            return Ok(l);
        }
    }
    Err(Error::FeasibleSampleExhausted { retries: MAX_RETRIES })
}

/// Builds the full certificate for a feasible gain.
pub fn certify(gain: &DMatrix<f64>, plant: &StateSpaceModel, alpha: f64) -> Result<StabilityCert> {
    match membership(gain, plant, alpha)? {
        Membership::Feasible { p } => {
            let (gamma, lambda) = stability_bounds(alpha)?;
            Ok(StabilityCert { p, alpha, gamma, lambda })
        }
        Membership::Unstable { rho } => Err(Error::UnstableMatrix { rho }),
        Membership::TraceExceeded { g } => {
            Err(Error::InfeasibleStart(format!("trace constraint violated, g = {}", g)))
        }
    }
}
