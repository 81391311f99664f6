//! Log-barrier interior-point solver for the stability-constrained PEM
//! problem, with multi-start and grid-search drivers and the alternating
//! MLE scheme.
//!
//! The Lyapunov certificate P is eliminated; each barrier level minimizes
//! V_N(L) - mu * log(-g(L)) by damped Gauss-Newton steps with Armijo
//! backtracking. Steps that leave the stable region or the feasible set are
//! rejected before the Armijo test.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dataset, ExtendedData, StateSpaceModel};
use crate::pem::{self, MleParams};
use crate::stability::{self, constraint_value_grad, spectral_radius, Membership};

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Level of the Lyapunov trace constraint.
    pub alpha: f64,
    /// Initial barrier weight; None means 1e-2 * max(1, V_N(L0)).
    pub mu_b_init: Option<f64>,
    pub mu_b_factor: f64,
    pub mu_b_min: f64,
    /// Stationarity tolerance, scaled by max(1, V_N) at the final iterate.
    pub tol_grad: f64,
    pub max_iters: usize,
    pub ls_c1: f64,
    pub ls_backtrack: f64,
    pub max_backtracks: usize,
    /// Levenberg damping floor.
    pub reg: f64,
    /// Relative distance threshold for clustering multi-start solutions.
    pub cluster_tol: f64,
    /// Record the iterate path.
    pub trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            mu_b_init: None,
            mu_b_factor: 0.1,
            mu_b_min: 1e-8,
            tol_grad: 1e-8,
            max_iters: 400,
            ls_c1: 1e-4,
            ls_backtrack: 0.5,
            max_backtracks: 50,
            reg: 1e-8,
            cluster_tol: 1e-3,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub l_hat: DMatrix<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub barrier_levels: Vec<f64>,
    pub converged: bool,
    pub constraint_slack: f64,
    pub trace_path: Option<Vec<DMatrix<f64>>>,
}

/// Constraint value g(L) without the gradient; None if A - LC is unstable.
fn constraint_value(gain: &DMatrix<f64>, plant: &StateSpaceModel, alpha: f64) -> Option<f64> {
    match stability::membership(gain, plant, alpha) {
        Ok(Membership::Feasible { p }) => {
            Some(alpha * (p.trace() - p.nrows() as f64) - 1.0)
        }
        Ok(Membership::TraceExceeded { g }) => Some(g),
        _ => None,
    }
}

fn unvec(v: &DVector<f64>, n: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, q, v.as_slice())
}

/// Minimizes V_N over the feasible set from a feasible start.
pub fn minimize_pem(
    plant: &StateSpaceModel,
    data: &Dataset,
    w: &DMatrix<f64>,
    l0: &DMatrix<f64>,
    opts: &SolveOptions,
) -> Result<FitResult> {
    let n = plant.state_dim();
    let q = plant.output_dim();
    let g0 = constraint_value(l0, plant, opts.alpha)
        .ok_or_else(|| Error::InfeasibleStart("A - L0 C is unstable".into()))?;
    if g0 > stability::FEASIBILITY_SLACK {
        return Err(Error::InfeasibleStart(format!("constraint violated at L0, g = {}", g0)));
    }

    let mut l = l0.clone();
    let mut eval = pem::pem_eval(&l, plant, data, w)?;
    let mut mu = opts.mu_b_init.unwrap_or(1e-2 * eval.value.max(1.0));
    let mut levels = vec![mu];
    let mut damping = opts.reg;
    let mut iterations = 0usize;
    let mut path = opts.trace.then(|| vec![l.clone()]);

    'outer: loop {
        // Inner Gauss-Newton loop at the current barrier level.
        loop {
            if iterations >= opts.max_iters {
                break 'outer;
            }
            let (g, grad_g) = constraint_value_grad(&l, plant, opts.alpha)?;
            let grad_g_vec = DVector::from_column_slice(grad_g.as_slice());
            let grad_v_vec = DVector::from_column_slice(eval.gradient.as_slice());
            let barrier_grad = &grad_v_vec - &grad_g_vec * (mu / g);
            let inner_tol = (opts.tol_grad * eval.value.max(1.0)).max(0.1 * mu);
            if barrier_grad.norm() <= inner_tol {
                break;
            }
            let barrier_hess =
                &eval.gn_hessian + &grad_g_vec * grad_g_vec.transpose() * (mu / (g * g));

            // Damped step; increase damping until a step is accepted.
            let mut accepted = false;
            let mut stalled = false;
            let scale = 1.0 + l.norm();
            for _ in 0..30 {
                let system = &barrier_hess + DMatrix::identity(n * q, n * q) * damping;
                let Some(step) = system.lu().solve(&(-&barrier_grad)) else {
                    damping *= 10.0;
                    continue;
                };
                let descent = barrier_grad.dot(&step);
                if descent >= 0.0 {
                    damping *= 10.0;
                    continue;
                }
                let phi0 = eval.value - mu * (-g).ln();
                let step_norm = step.norm();
                let mut t = 1.0;
                let mut ok = false;
                for _ in 0..opts.max_backtracks {
                    // A trial move below float resolution cannot make
                    // representable progress; treat the search as failed.
                    if t * step_norm <= 1e-14 * scale {
                        break;
                    }
                    let cand = &l + unvec(&(&step * t), n, q);
                    let m_cand = &plant.a - &cand * &plant.c;
                    if spectral_radius(&m_cand) < 1.0 - 1e-9 {
                        if let Some(g_cand) = constraint_value(&cand, plant, opts.alpha) {
                            if g_cand < 0.0 {
                                if let Ok(cand_eval) = pem::pem_eval(&cand, plant, data, w) {
                                    let phi = cand_eval.value - mu * (-g_cand).ln();
                                    if phi <= phi0 + opts.ls_c1 * t * descent {
                                        l = cand;
                                        eval = cand_eval;
                                        ok = true;
                                        break;
                                    }
                                }
                            }
                        }
                    }
                    t *= opts.ls_backtrack;
                }
                if ok {
                    accepted = true;
                    damping = (damping * 0.3).max(opts.reg);
                    // Accepted moves this small mean the gradient has hit its
                    // floating-point noise floor; further iterations at this
                    // level only churn.
                    stalled = t * step_norm <= 1e-12 * scale;
                    break;
                }
                damping *= 10.0;
            }
            iterations += 1;
            if let Some(p) = path.as_mut() {
                p.push(l.clone());
            }
            if !accepted || stalled {
                // No meaningful step at this level; tighten the barrier or stop.
                break;
            }
        }
        if mu <= opts.mu_b_min {
            break;
        }
        mu = (mu * opts.mu_b_factor).max(opts.mu_b_min);
        levels.push(mu);
    }

    let (g, grad_g) = constraint_value_grad(&l, plant, opts.alpha)?;
    let tol = opts.tol_grad * eval.value.max(1.0);
    let stationarity = if g < -0.1 {
        eval.gradient.norm()
    } else {
        let nu = -mu / g;
        (&eval.gradient + &grad_g * nu).norm()
    };
    Ok(FitResult {
        grad_norm: eval.gradient.norm(),
        converged: stationarity <= tol,
        l_hat: l,
        value: eval.value,
        iterations,
        barrier_levels: levels,
        constraint_slack: g,
        trace_path: path,
    })
}

#[derive(Debug, Clone)]
pub struct StartOutcome {
    pub start_index: usize,
    pub l0: DMatrix<f64>,
    pub result: std::result::Result<FitResult, String>,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub representative: DMatrix<f64>,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct MultiStartResult {
    pub outcomes: Vec<StartOutcome>,
    pub clusters: Vec<Cluster>,
}

fn derive_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Runs the solver from `n_starts` sampled feasible gains and clusters the
/// final iterates.
pub fn multi_start(
    plant: &StateSpaceModel,
    data: &Dataset,
    w: &DMatrix<f64>,
    n_starts: usize,
    seed: u64,
    opts: &SolveOptions,
) -> Result<MultiStartResult> {
    if n_starts == 0 {
        return Err(Error::InvalidParameter("n_starts must be >= 1".into()));
    }
    let mut outcomes = Vec::with_capacity(n_starts);
    for idx in 0..n_starts {
        let start_seed = derive_seed(seed, idx);
        match stability::sample_feasible_gain(plant, opts.alpha, start_seed) {
            Ok(l0) => {
                let result = minimize_pem(plant, data, w, &l0, opts).map_err(|e| e.to_string());
                outcomes.push(StartOutcome { start_index: idx, l0, result });
            }
            Err(e) => outcomes.push(StartOutcome {
                start_index: idx,
                l0: DMatrix::zeros(plant.state_dim(), plant.output_dim()),
                result: Err(e.to_string()),
            }),
        }
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for outcome in &outcomes {
        let Ok(fit) = &outcome.result else { continue };
        let threshold = opts.cluster_tol * (1.0 + fit.l_hat.norm());
        match clusters.iter_mut().find(|c| (&c.representative - &fit.l_hat).norm() <= threshold) {
            Some(c) => {
                c.count += 1;
                if fit.value < c.value {
                    c.representative = fit.l_hat.clone();
                    c.value = fit.value;
                }
            }
            None => clusters.push(Cluster {
                representative: fit.l_hat.clone(),
                value: fit.value,
                count: 1,
            }),
        }
    }
    Ok(MultiStartResult { outcomes, clusters })
}

/// Evaluates V_N on every grid point; unstable points get +inf.
pub fn grid_search(
    plant: &StateSpaceModel,
    data: &Dataset,
    w: &DMatrix<f64>,
    grid: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::EmptyFeasibleGrid);
    }
    let mut values = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (idx, l) in grid.iter().enumerate() {
        let m = &plant.a - l * &plant.c;
        let v = if spectral_radius(&m) >= 1.0 - stability::STABILITY_MARGIN {
            f64::INFINITY
        } else {
            match pem::pem_value(l, plant, data, w) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            }
        };
        values.push(v);
        if v.is_finite() && best.map_or(true, |(_, bv)| v < bv) {
            best = Some((idx, v));
        }
    }
    let (idx, _) = best.ok_or(Error::EmptyFeasibleGrid)?;
    Ok((grid[idx].clone(), values))
}

#[derive(Debug, Clone)]
pub struct MleDiagnostics {
    pub sweeps: usize,
    pub objective_path: Vec<f64>,
    pub converged: bool,
    pub l_fit: FitResult,
}

/// Alternating block-coordinate minimization of the MLE objective:
/// closed-form beta, interior-point step in L with W = S^{-1}, closed-form S.
pub fn minimize_mle(
    plant: &StateSpaceModel,
    ext: &ExtendedData,
    theta0: &MleParams,
    opts: &SolveOptions,
) -> Result<(MleParams, MleDiagnostics)> {
    const MAX_SWEEPS: usize = 50;
    const PARAM_TOL: f64 = 1e-8;
    let mut theta = theta0.clone();
    let mut objective_path = vec![pem::mle_value(&theta, plant, ext)?];
    let mut l_fit = None;
    let mut converged = false;
    let mut sweeps = 0;
    for _ in 0..MAX_SWEEPS {
        sweeps += 1;
        let prev = theta.clone();

        // (1) beta: exact weighted least squares given (L, S).
        let (beta, _) = pem::mle_partial_updates(&theta, plant, ext)?;
        theta.beta = beta;

        // (2) L: PEM step with W = S^{-1} on the beta-compensated data. The
        // Phi_k beta term is folded into an equivalent input sequence.
        let s_inv = theta
            .s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParameter("S must be invertible".into()))?;
        let s_inv = (&s_inv + s_inv.transpose()) * 0.5;
        let n = plant.state_dim();
        let eff_plant = StateSpaceModel::new(
            plant.a.clone(),
            DMatrix::identity(n, n),
            plant.c.clone(),
            plant.x0.clone(),
        )?;
        let eff_inputs: Vec<DVector<f64>> = (0..ext.base.y.len())
            .map(|k| {
                let mut v = &plant.b * &ext.base.u[k];
                if !theta.beta.is_empty() {
                    v += &ext.phi[k] * &theta.beta;
                }
                v
            })
            .collect();
        let eff_data = Dataset::new(eff_inputs, ext.base.y.clone())?;
        let fit = minimize_pem(&eff_plant, &eff_data, &s_inv, &theta.l, opts)?;
        theta.l = fit.l_hat.clone();
        l_fit = Some(fit);

        // (3) S: residual sample covariance at the updated (beta, L).
        let (_, s) = pem::mle_partial_updates(&theta, plant, ext)?;
        theta.s = s;

        objective_path.push(pem::mle_value(&theta, plant, ext)?);
        let change = (&theta.beta - &prev.beta).norm()
            + (&theta.l - &prev.l).norm()
            + (&theta.s - &prev.s).norm();
        let scale = 1.0 + theta.beta.norm() + theta.l.norm() + theta.s.norm();
        if change <= PARAM_TOL * scale {
            converged = true;
            break;
        }
    }
    let diagnostics = MleDiagnostics {
        sweeps,
        objective_path,
        converged,
        l_fit: l_fit.expect("at least one sweep runs"),
    };
    Ok((theta, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, InnovationModel, NoiseSpec, StateSpaceModel};
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    fn one_dim_model() -> InnovationModel {
        let plant = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )
        .unwrap();
        InnovationModel::new(
            plant,
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn eye(q: usize) -> DMatrix<f64> {
        DMatrix::identity(q, q)
    }

    #[test]
    fn recovers_scalar_gain() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 101);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 10_001), &noise).unwrap();
        let opts = SolveOptions::default();
        let fit = minimize_pem(
            &m.plant,
            &data,
            &eye(1),
            &DMatrix::from_element(1, 1, 0.3),
            &opts,
        )
        .unwrap();
        assert!(fit.converged, "{:?}", fit);
        assert!((fit.l_hat[(0, 0)] - 0.8).abs() < 0.05, "L̂ = {}", fit.l_hat[(0, 0)]);
        assert!(fit.constraint_slack < 0.0);
    }

    #[test]
    fn zero_residual_data_is_driven_to_zero() {
        // Single nonzero innovation: at L = L* only finitely many residuals
        // are nonzero and V_N can reach ~0.
        let m = one_dim_model();
        let mut x = 0.0;
        let count = 200;
        let y: Vec<DVector<f64>> = (0..count)
            .map(|k| {
                let e = if k == 0 { 1.0 } else { 0.0 };
                let yk = x + e;
                x = 0.9 * x + 0.8 * e;
                DVector::from_element(1, yk)
            })
            .collect();
        let data = crate::model::Dataset::new(model::zero_inputs(0, count), y).unwrap();
        let fit = minimize_pem(
            &m.plant,
            &data,
            &eye(1),
            &DMatrix::from_element(1, 1, 0.3),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(fit.value <= 1e-12, "V = {}", fit.value);
    }

    #[test]
    fn barrier_removal_does_not_move_interior_optimum() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 7);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 2001), &noise).unwrap();
        let opts = SolveOptions::default();
        let fit = minimize_pem(
            &m.plant,
            &data,
            &eye(1),
            &DMatrix::from_element(1, 1, 0.5),
            &opts,
        )
        .unwrap();
        assert!(fit.constraint_slack < 0.0);
        // Plain Gauss-Newton refinement without the barrier from L̂.
        let mut l = fit.l_hat.clone();
        for _ in 0..20 {
            let eval = pem::pem_eval(&l, &m.plant, &data, &eye(1)).unwrap();
            let step = -(eval.gn_hessian[(0, 0)] + 1e-12).recip() * eval.gradient[(0, 0)];
            l[(0, 0)] += step;
        }
        assert!((l - &fit.l_hat).norm() <= 1e-6);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 1);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 101), &noise).unwrap();
        let err = minimize_pem(
            &m.plant,
            &data,
            &eye(1),
            &DMatrix::from_element(1, 1, -0.5),
            &SolveOptions::default(),
        );
        assert!(matches!(err, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn deterministic_rerun_is_identical() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 55);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 501), &noise).unwrap();
        let opts = SolveOptions::default();
        let a = multi_start(&m.plant, &data, &eye(1), 5, 42, &opts).unwrap();
        let b = multi_start(&m.plant, &data, &eye(1), 5, 42, &opts).unwrap();
        for (x, y) in a.outcomes.iter().zip(b.outcomes.iter()) {
            let (Ok(fx), Ok(fy)) = (&x.result, &y.result) else { panic!() };
            assert_eq!(fx.l_hat, fy.l_hat);
            assert_eq!(fx.value, fy.value);
        }
    }

    #[test]
    fn single_start_single_cluster() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 3);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 501), &noise).unwrap();
        let res = multi_start(&m.plant, &data, &eye(1), 1, 9, &SolveOptions::default()).unwrap();
        assert_eq!(res.clusters.len(), 1);
        assert_eq!(res.clusters[0].count, 1);
    }

    #[test]
    fn grid_search_basics() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 17);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 5001), &noise).unwrap();
        let grid: Vec<DMatrix<f64>> = (0..80)
            .map(|i| DMatrix::from_element(1, 1, -0.05 + 0.025 * i as f64))
            .collect();
        let (best, values) = grid_search(&m.plant, &data, &eye(1), &grid).unwrap();
        assert!((best[(0, 0)] - 0.8).abs() <= 0.1, "argmin {}", best[(0, 0)]);
        assert_eq!(values.len(), 80);
        // Unstable points (|0.9 - L| >= 1) are marked +inf; L = -0.05 is near
        // the boundary but stable, so check a singleton grid too.
        let singleton = vec![DMatrix::from_element(1, 1, 0.4)];
        let (only, _) = grid_search(&m.plant, &data, &eye(1), &singleton).unwrap();
        assert_abs_diff_eq!(only[(0, 0)], 0.4);
        // All-unstable grid errors.
        let bad = vec![DMatrix::from_element(1, 1, -2.0)];
        assert!(matches!(
            grid_search(&m.plant, &data, &eye(1), &bad),
            Err(Error::EmptyFeasibleGrid)
        ));
    }

    #[test]
    fn mle_reduces_to_pem_without_extension() {
        let m = one_dim_model();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 23);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 2001), &noise).unwrap();
        let opts = SolveOptions::default();
        let pem_fit = minimize_pem(
            &m.plant,
            &data,
            &eye(1),
            &DMatrix::from_element(1, 1, 0.4),
            &opts,
        )
        .unwrap();
        let ext = ExtendedData::new(data, vec![DMatrix::zeros(1, 0); 2001]).unwrap();
        let theta0 = MleParams {
            beta: DVector::zeros(0),
            l: DMatrix::from_element(1, 1, 0.4),
            s: eye(1),
        };
        let (theta, diag) = minimize_mle(&m.plant, &ext, &theta0, &opts).unwrap();
        // S converges near the residual variance (~1), so the L problems are
        // equivalent up to the scalar weight; the minimizers agree.
        assert!((theta.l[(0, 0)] - pem_fit.l_hat[(0, 0)]).abs() < 1e-4);
        for pair in diag.objective_path.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}
