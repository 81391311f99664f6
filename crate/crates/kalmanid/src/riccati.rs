//! Steady-state Kalman gain from the discrete algebraic Riccati equation.
//!
//! Fixed-point iteration of the Riccati recursion from Sigma_0 = Q. Under
//! observability and R > 0 this converges at desk scale; a doubling scheme
//! would be faster but is not needed for n <= 10.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{InnovationModel, StateSpaceModel};
use crate::stability::spectral_radius;

const MAX_ITERS: usize = 1_000_000;
const TOL: f64 = 1e-13;

/// Steady-state prediction error covariance with the induced gain and
/// innovation covariance.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub sigma: DMatrix<f64>,
    pub l_star: DMatrix<f64>,
    pub s_star: DMatrix<f64>,
}

impl DareSolution {
    /// Relative fixed-point residual of the Riccati equation.
    pub fn residual(&self, a: &DMatrix<f64>, c: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
        let s = c * &self.sigma * c.transpose() + r;
        let s_inv = s.clone().try_inverse().expect("S* invertible by construction");
        let next = a * &self.sigma * a.transpose() + q
            - a * &self.sigma * c.transpose() * s_inv * c * &self.sigma * a.transpose();
        (&next - &self.sigma).abs().max() / self.sigma.abs().max().max(1.0)
    }
}

/// Solves the DARE for the one-step predictor form:
/// Sigma = A Sigma A^T + Q - A Sigma C^T (C Sigma C^T + R)^{-1} C Sigma A^T,
/// L* = A Sigma C^T (C Sigma C^T + R)^{-1}, S* = C Sigma C^T + R.
pub fn solve_dare(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q_proc: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution> {
    let n = a.nrows();
    let q_dim = c.nrows();
    if a.ncols() != n || c.ncols() != n || q_proc.nrows() != n || q_proc.ncols() != n {
        return Err(Error::DimensionMismatch("DARE: inconsistent A/C/Q dimensions".into()));
    }
    if r.nrows() != q_dim || r.ncols() != q_dim {
        return Err(Error::DimensionMismatch("DARE: R must be q x q".into()));
    }
    let mut sigma = q_proc.clone();
    for _ in 0..MAX_ITERS {
        let s = c * &sigma * c.transpose() + r;
        let s_inv = s.clone().try_inverse().ok_or(Error::SingularInnovationCov)?;
        let gain_term = a * &sigma * c.transpose();
        let next = a * &sigma * a.transpose() + q_proc - &gain_term * &s_inv * gain_term.transpose();
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &sigma).abs().max();
        sigma = next;
        if delta <= TOL * sigma.abs().max().max(1.0) {
            let s = c * &sigma * c.transpose() + r;
            let s_inv = s.clone().try_inverse().ok_or(Error::SingularInnovationCov)?;
            let l_star = a * &sigma * c.transpose() * s_inv;
            return Ok(DareSolution { sigma, l_star, s_star: s });
        }
    }
    Err(Error::NonConvergence { max_iters: MAX_ITERS })
}

/// Wraps the plant into innovation form using the DARE gain and covariance.
pub fn to_innovation_form(
    plant: &StateSpaceModel,
    q_proc: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<InnovationModel> {
    let sol = solve_dare(&plant.a, &plant.c, q_proc, r)?;
    let m = &plant.a - &sol.l_star * &plant.c;
    let rho = spectral_radius(&m);
    if rho >= 1.0 {
        return Err(Error::UnstableMatrix { rho });
    }
    InnovationModel::new(plant.clone(), sol.l_star, sol.s_star)
}
