//! Prediction-error and likelihood objectives with analytic derivatives.
//!
//! The finite-sample cost is V_N(L) = (1/N) sum_{k=1..N} ||y_k - C x̂_k||^2_W.
//! Its gradient comes from forward sensitivities of the predictor recursion,
//! which also yield the residual Jacobian for the Gauss-Newton Hessian. The
//! asymptotic limit V̄(L) = tr(W (S* + C Σ̄(L) C^T)) and its closed-form
//! gradient are evaluated through discrete Lyapunov solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{predict_states, predict_states_extended, Dataset, ExtendedData, InnovationModel, StateSpaceModel};
use crate::stability::{solve_dlyap, spectral_radius};

/// Finite-sample objective evaluation at one gain.
#[derive(Debug, Clone)]
pub struct PemEval {
    pub value: f64,
    /// dV_N/dL, n x q.
    pub gradient: DMatrix<f64>,
    /// Gauss-Newton curvature (2/N) J^T W J over vec(L), (nq) x (nq).
    pub gn_hessian: DMatrix<f64>,
    pub residuals: Vec<DVector<f64>>,
}

/// Asymptotic objective evaluation at one gain.
#[derive(Debug, Clone)]
pub struct AsymptoticEval {
    pub sigma_bar: DMatrix<f64>,
    pub v_bar: f64,
    pub grad_v_bar: DMatrix<f64>,
    /// Direction D = (L - L*) S* - (A - LC) Σ̄ C^T; zero exactly at
    /// stationary points.
    pub d: DMatrix<f64>,
}

/// Parameters of the extended maximum-likelihood problem.
#[derive(Debug, Clone)]
pub struct MleParams {
    pub beta: DVector<f64>,
    pub l: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

fn check_weight(w: &DMatrix<f64>, q: usize) -> Result<()> {
    if w.nrows() != q || w.ncols() != q {
        return Err(Error::DimensionMismatch("W must be q x q".into()));
    }
    if (w - w.transpose()).abs().max() > 1e-10 || w.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("W must be symmetric positive-definite".into()));
    }
    Ok(())
}

fn weighted_sq(r: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (r.transpose() * w * r)[(0, 0)]
}

/// V_N(L) for a dataset; the sum skips k = 0.
pub fn pem_value(
    gain: &DMatrix<f64>,
    plant: &StateSpaceModel,
    data: &Dataset,
    w: &DMatrix<f64>,
) -> Result<f64> {
    check_weight(w, plant.output_dim())?;
    let (_, residuals) = predict_states(plant, gain, data)?;
    let n = data.horizon();
    if n == 0 {
        return Err(Error::InvalidParameter("dataset needs at least two samples".into()));
    }
    Ok(residuals[1..].iter().map(|r| weighted_sq(r, w)).sum::<f64>() / n as f64)
}

/// Column-major flat index of L_{ij} in vec(L).
#[inline]
fn vec_index(i: usize, j: usize, n: usize) -> usize {
    j * n + i
}

/// Value, gradient and Gauss-Newton curvature of V_N at one gain.
///
/// Sensitivities follow s^{(ij)}_{k+1} = (A - LC) s^{(ij)}_k + E_ij r_k with
/// s_0 = 0, giving residual derivatives dr_k/dL_ij = -C s^{(ij)}_k.
pub fn pem_eval(
    gain: &DMatrix<f64>,
    plant: &StateSpaceModel,
    data: &Dataset,
    w: &DMatrix<f64>,
) -> Result<PemEval> {
    let n_dim = plant.state_dim();
    let q = plant.output_dim();
    check_weight(w, q)?;
    let (_, residuals) = predict_states(plant, gain, data)?;
    let horizon = data.horizon();
    if horizon == 0 {
        return Err(Error::InvalidParameter("dataset needs at least two samples".into()));
    }
    let m = &plant.a - gain * &plant.c;
    let nq = n_dim * q;

    // Columns of `sens` hold all nq sensitivity vectors at the current k.
    let mut sens = DMatrix::<f64>::zeros(n_dim, nq);
    let mut value = 0.0;
    let mut grad = DVector::<f64>::zeros(nq);
    let mut hess = DMatrix::<f64>::zeros(nq, nq);
    for k in 0..=horizon {
        let r = &residuals[k];
        if k >= 1 {
            value += weighted_sq(r, w);
            let jac = -(&plant.c * &sens); // q x nq residual Jacobian block
            grad += jac.transpose() * w * r;
            hess += jac.transpose() * w * jac;
        }
        if k < horizon {
            let mut next = &m * &sens;
            for i in 0..n_dim {
                for j in 0..q {
                    next[(i, vec_index(i, j, n_dim))] += r[j];
                }
            }
            sens = next;
        }
    }
    let scale = 2.0 / horizon as f64;
    let gradient = DMatrix::from_column_slice(n_dim, q, (grad * scale).as_slice());
    let gn_hessian = (&hess + hess.transpose()) * (scale * 0.5);
    Ok(PemEval {
        value: value / horizon as f64,
        gradient,
        gn_hessian,
        residuals,
    })
}

/// Asymptotic objective, its closed-form gradient and the direction D.
pub fn asymptotic_eval(
    gain: &DMatrix<f64>,
    model: &InnovationModel,
    w: &DMatrix<f64>,
) -> Result<AsymptoticEval> {
    let plant = &model.plant;
    check_weight(w, plant.output_dim())?;
    let m = &plant.a - gain * &plant.c;
    let rho = spectral_radius(&m);
    if rho >= 1.0 {
        return Err(Error::UnstableMatrix { rho });
    }
    let dl = gain - &model.l_star;
    let forcing = &dl * &model.s_star * dl.transpose();
    let sigma_bar = solve_dlyap(&m, &forcing)?;
    let v_bar = (w * (&model.s_star + &plant.c * &sigma_bar * plant.c.transpose())).trace();
    let lambda_w = solve_dlyap(&m.transpose(), &(plant.c.transpose() * w * &plant.c))?;
    let d = &dl * &model.s_star - &m * &sigma_bar * plant.c.transpose();
    let grad_v_bar = &lambda_w * &d * 2.0;
    Ok(AsymptoticEval { sigma_bar, v_bar, grad_v_bar, d })
}

/// One row of the uniform-convergence table: seed-averaged sup deviations
/// between the finite-sample objective/gradient and their limits.
#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub n: usize,
    pub sup_value_dev: f64,
    pub sup_grad_dev: f64,
}

/// Measures sup-norm deviation of (V_N, ∇V_N) from (V̄, ∇V̄) over a grid of
/// gains, averaged over independent realizations.
pub fn empirical_uniform_convergence(
    model: &InnovationModel,
    w: &DMatrix<f64>,
    grid: &[DMatrix<f64>],
    n_list: &[usize],
    seeds: &[u64],
) -> Result<Vec<ConvergenceRow>> {
    use crate::model::{simulate_innovation, zero_inputs, NoiseSpec};
    let limits: Vec<AsymptoticEval> = grid
        .iter()
        .map(|l| asymptotic_eval(l, model, w))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut val_acc = 0.0;
        let mut grad_acc = 0.0;
        for &seed in seeds {
            let noise = NoiseSpec::gaussian(&model.s_star, seed);
            let inputs = zero_inputs(model.plant.input_dim(), n + 1);
            let (data, _) = simulate_innovation(model, &inputs, &noise)?;
            let mut sup_v: f64 = 0.0;
            let mut sup_g: f64 = 0.0;
            for (l, lim) in grid.iter().zip(limits.iter()) {
                let eval = pem_eval(l, &model.plant, &data, w)?;
                sup_v = sup_v.max((eval.value - lim.v_bar).abs());
                sup_g = sup_g.max((&eval.gradient - &lim.grad_v_bar).norm());
            }
            val_acc += sup_v;
            grad_acc += sup_g;
        }
        let count = seeds.len() as f64;
        rows.push(ConvergenceRow {
            n,
            sup_value_dev: val_acc / count,
            sup_grad_dev: grad_acc / count,
        });
    }
    Ok(rows)
}

fn logdet_pd(s: &DMatrix<f64>) -> Result<f64> {
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::InvalidParameter("S must be positive-definite".into())
    })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Negative log-likelihood (up to constants):
/// (1/N) sum ||y_k - C x̂_k(θ)||^2_{S^{-1}} + log det S.
pub fn mle_value(theta: &MleParams, plant: &StateSpaceModel, ext: &ExtendedData) -> Result<f64> {
    let logdet = logdet_pd(&theta.s)?;
    let s_inv = theta
        .s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("S must be invertible".into()))?;
    let (_, residuals) = predict_states_extended(plant, &theta.beta, &theta.l, ext)?;
    let n = ext.base.horizon();
    if n == 0 {
        return Err(Error::InvalidParameter("dataset needs at least two samples".into()));
    }
    let fit = residuals[1..].iter().map(|r| weighted_sq(r, &s_inv)).sum::<f64>() / n as f64;
    Ok(fit + logdet)
}

/// Closed-form block updates for the alternating MLE scheme.
///
/// The residuals are affine in beta through the sensitivity recursion
/// T_{k+1} = (A - LC) T_k + Phi_k, so the beta update is a weighted least
/// squares; the S update is the residual sample covariance with a small
/// eigenvalue clamp.
pub fn mle_partial_updates(
    theta: &MleParams,
    plant: &StateSpaceModel,
    ext: &ExtendedData,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n_dim = plant.state_dim();
    let q = plant.output_dim();
    let n_beta = ext.n_beta();
    let horizon = ext.base.horizon();
    if horizon < q {
        return Err(Error::InvalidParameter("need at least q effective samples".into()));
    }
    let s_inv = theta
        .s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("S must be invertible".into()))?;
    let m = &plant.a - &theta.l * &plant.c;

    // Residuals at beta = 0 give the affine baseline.
    let (_, r0) = predict_states_extended(plant, &DVector::zeros(n_beta), &theta.l, ext)?;
    let beta_update = if n_beta == 0 {
        DVector::zeros(0)
    } else {
        let mut t = DMatrix::<f64>::zeros(n_dim, n_beta);
        let mut normal = DMatrix::<f64>::zeros(n_beta, n_beta);
        let mut rhs = DVector::<f64>::zeros(n_beta);
        for k in 0..=horizon {
            if k >= 1 {
                let ct = &plant.c * &t;
                normal += ct.transpose() * &s_inv * &ct;
                rhs += ct.transpose() * &s_inv * &r0[k];
            }
            if k < horizon {
                t = &m * &t + &ext.phi[k];
            }
        }
        normal
            .clone()
            .cholesky()
            .ok_or(Error::SingularRegression)?
            .solve(&rhs)
    };

    // S update from residuals at the current theta.
    let (_, residuals) = predict_states_extended(plant, &theta.beta, &theta.l, ext)?;
    let mut cov = DMatrix::<f64>::zeros(q, q);
    for r in &residuals[1..] {
        cov += r * r.transpose();
    }
    cov /= horizon as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mut eig = cov.symmetric_eigen();
    for ev in eig.eigenvalues.iter_mut() {
        *ev = ev.max(1e-10);
    }
    let s_update = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues)
        * eig.eigenvectors.transpose();
    Ok((beta_update, s_update))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, InnovationModel, NoiseSpec, StateSpaceModel};
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_model(a: f64, c: f64, l: f64, s: f64) -> InnovationModel {
        let plant = StateSpaceModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, c),
            nalgebra::DVector::zeros(1),
        )
        .unwrap();
        InnovationModel::new(
            plant,
            DMatrix::from_element(1, 1, l),
            DMatrix::from_element(1, 1, s),
        )
        .unwrap()
    }

    fn scalar_data(e: &[f64]) -> Dataset {
        // Innovation-form data for the A=0.9, C=1, L*=0.8 system.
        let mut x = 0.0;
        let y = e
            .iter()
            .map(|ek| {
                let yk = x + ek;
                x = 0.9 * x + 0.8 * ek;
                nalgebra::DVector::from_element(1, yk)
            })
            .collect();
        Dataset::new(model::zero_inputs(0, e.len()), y).unwrap()
    }

    fn eye(q: usize) -> DMatrix<f64> {
        DMatrix::identity(q, q)
    }

    #[test]
    fn value_at_truth_is_mean_square_innovation() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let data = scalar_data(&[0.3, 1.0, -1.0]);
        let v = pem_value(&m.l_star, &m.plant, &data, &eye(1)).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn hand_value_and_gradient_n1() {
        // e = (1, 0), L = 0.9: V_1 = (e_1 - (L - L*) e_0)^2 = 0.01,
        // dV/dL = -2 (e_1 - (L - L*) e_0) e_0 = 0.2.
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let data = scalar_data(&[1.0, 0.0]);
        let l = DMatrix::from_element(1, 1, 0.9);
        let eval = pem_eval(&l, &m.plant, &data, &eye(1)).unwrap();
        assert_abs_diff_eq!(eval.value, 0.01, epsilon = 1e-14);
        assert_abs_diff_eq!(eval.gradient[(0, 0)], 0.2, epsilon = 1e-13);
    }

    #[test]
    fn value_is_input_invariant() {
        // Same innovations, different inputs: V_N identical on a grid of L.
        let plant_b = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            nalgebra::DVector::zeros(1),
        )
        .unwrap();
        let model_b = InnovationModel::new(
            plant_b.clone(),
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 5);
        let (data_zero, _) =
            model::simulate_innovation(&model_b, &model::zero_inputs(1, 300), &noise).unwrap();
        let (data_rand, _) =
            model::simulate_innovation(&model_b, &model::random_inputs(1, 300, 8), &noise).unwrap();
        let mut l = 0.0;
        while l <= 1.6 {
            let gain = DMatrix::from_element(1, 1, l);
            let va = pem_value(&gain, &plant_b, &data_zero, &eye(1)).unwrap();
            let vb = pem_value(&gain, &plant_b, &data_rand, &eye(1)).unwrap();
            assert!((va - vb).abs() < 1e-12 * va.max(1.0), "L = {}", l);
            l += 0.1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences_two_state() {
        let (a_d, b_f) = model::discretize_particle(0.1, 0.1).unwrap();
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let plant =
            StateSpaceModel::new(a_d, DMatrix::zeros(2, 0), c, nalgebra::DVector::zeros(2)).unwrap();
        let q_proc = &b_f * b_f.transpose() * 100.0;
        let r = DMatrix::from_element(1, 1, 1.0);
        let innov = crate::riccati::to_innovation_form(&plant, &q_proc, &r).unwrap();
        let noise = NoiseSpec::gaussian(&innov.s_star, 3);
        let (data, _) =
            model::simulate_innovation(&innov, &model::zero_inputs(0, 401), &noise).unwrap();
        let w = eye(1);
        for seed in 0..20 {
            let l = crate::stability::sample_feasible_gain(&plant, 0.02, 500 + seed).unwrap();
            let eval = pem_eval(&l, &plant, &data, &w).unwrap();
            for i in 0..2 {
                let h = 1e-6 * l[(i, 0)].abs().max(1.0);
                let mut lp = l.clone();
                lp[(i, 0)] += h;
                let mut lm = l.clone();
                lm[(i, 0)] -= h;
                let vp = pem_value(&lp, &plant, &data, &w).unwrap();
                let vm = pem_value(&lm, &plant, &data, &w).unwrap();
                let fd = (vp - vm) / (2.0 * h);
                let scale = fd.abs().max(eval.gradient[(i, 0)].abs()).max(1e-6);
                assert!(
                    (eval.gradient[(i, 0)] - fd).abs() / scale < 1e-5,
                    "seed {} i {}: {} vs {}",
                    seed,
                    i,
                    eval.gradient[(i, 0)],
                    fd
                );
            }
        }
    }

    #[test]
    fn gradient_unbiased_at_truth() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let mut grads = Vec::new();
        for seed in 0..200u64 {
            let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), seed);
            let (data, _) =
                model::simulate_innovation(&m, &model::zero_inputs(0, 201), &noise).unwrap();
            let eval = pem_eval(&m.l_star, &m.plant, &data, &eye(1)).unwrap();
            grads.push(eval.gradient[(0, 0)]);
        }
        let n = grads.len() as f64;
        let mean = grads.iter().sum::<f64>() / n;
        let var = grads.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(mean.abs() <= 4.0 * se, "mean {} se {}", mean, se);
    }

    #[test]
    fn gn_hessian_is_psd() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.0), 9);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 200), &noise).unwrap();
        for l in [-0.05, 0.3, 0.8, 1.5] {
            let eval = pem_eval(&DMatrix::from_element(1, 1, l), &m.plant, &data, &eye(1)).unwrap();
            assert!(eval.gn_hessian[(0, 0)] >= -1e-10);
        }
    }

    #[test]
    fn asymptotic_at_truth_is_flat_minimum() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let eval = asymptotic_eval(&m.l_star, &m, &eye(1)).unwrap();
        assert_abs_diff_eq!(eval.sigma_bar[(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eval.v_bar, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eval.d[(0, 0)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(eval.grad_v_bar[(0, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn asymptotic_scalar_closed_form() {
        // L = 0.5: M = 0.4, Σ̄ = 0.09/0.84, V̄ = 1 + Σ̄,
        // Λ = 1/0.84, D = -0.3 - 0.4 Σ̄, grad = 2 Λ D.
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let eval = asymptotic_eval(&DMatrix::from_element(1, 1, 0.5), &m, &eye(1)).unwrap();
        let sigma = 0.09 / 0.84;
        assert_abs_diff_eq!(eval.sigma_bar[(0, 0)], sigma, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.v_bar, 1.0 + sigma, epsilon = 1e-12);
        let d = -0.3 - 0.4 * sigma;
        assert_abs_diff_eq!(eval.d[(0, 0)], d, epsilon = 1e-12);
        assert_abs_diff_eq!(eval.grad_v_bar[(0, 0)], 2.0 * d / 0.84, epsilon = 1e-10);
        // Cross-check by central finite differences of V̄.
        let h = 1e-6;
        let vp = asymptotic_eval(&DMatrix::from_element(1, 1, 0.5 + h), &m, &eye(1)).unwrap().v_bar;
        let vm = asymptotic_eval(&DMatrix::from_element(1, 1, 0.5 - h), &m, &eye(1)).unwrap().v_bar;
        assert_abs_diff_eq!(eval.grad_v_bar[(0, 0)], (vp - vm) / (2.0 * h), epsilon = 1e-8);
    }

    #[test]
    fn asymptotic_grad_matches_fd_two_state() {
        let (a_d, b_f) = model::discretize_particle(0.1, 0.1).unwrap();
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let plant =
            StateSpaceModel::new(a_d, DMatrix::zeros(2, 0), c, nalgebra::DVector::zeros(2)).unwrap();
        let q_proc = &b_f * b_f.transpose() * 100.0;
        let r = DMatrix::from_element(1, 1, 1.0);
        let innov = crate::riccati::to_innovation_form(&plant, &q_proc, &r).unwrap();
        let w = eye(1);
        for seed in 0..20 {
            let l = crate::stability::sample_feasible_gain(&plant, 0.02, 700 + seed).unwrap();
            let eval = asymptotic_eval(&l, &innov, &w).unwrap();
            for i in 0..2 {
                let h = 1e-6 * l[(i, 0)].abs().max(1.0);
                let mut lp = l.clone();
                lp[(i, 0)] += h;
                let mut lm = l.clone();
                lm[(i, 0)] -= h;
                let vp = asymptotic_eval(&lp, &innov, &w).unwrap().v_bar;
                let vm = asymptotic_eval(&lm, &innov, &w).unwrap().v_bar;
                let fd = (vp - vm) / (2.0 * h);
                let scale = fd.abs().max(eval.grad_v_bar[(i, 0)].abs()).max(1e-6);
                assert!((eval.grad_v_bar[(i, 0)] - fd).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn directional_derivative_of_sigma_is_psd_on_outputs() {
        // C Σ̇ C^T ⪰ 0 along the direction D at random stable gains.
        let (a_d, b_f) = model::discretize_particle(0.1, 0.1).unwrap();
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let plant =
            StateSpaceModel::new(a_d, DMatrix::zeros(2, 0), c, nalgebra::DVector::zeros(2)).unwrap();
        let q_proc = &b_f * b_f.transpose() * 100.0;
        let r = DMatrix::from_element(1, 1, 1.0);
        let innov = crate::riccati::to_innovation_form(&plant, &q_proc, &r).unwrap();
        for seed in 0..10 {
            let l = crate::stability::sample_feasible_gain(&plant, 0.02, 900 + seed).unwrap();
            let eval = asymptotic_eval(&l, &innov, &eye(1)).unwrap();
            let h = 1e-6 / eval.d.norm().max(1.0);
            let lp = &l + &eval.d * h;
            let lm = &l - &eval.d * h;
            let sp = asymptotic_eval(&lp, &innov, &eye(1)).unwrap().sigma_bar;
            let sm = asymptotic_eval(&lm, &innov, &eye(1)).unwrap().sigma_bar;
            let sigma_dot = (sp - sm) / (2.0 * h);
            let out = &innov.plant.c * sigma_dot * innov.plant.c.transpose();
            assert!(out[(0, 0)] >= -1e-6, "seed {}: {}", seed, out[(0, 0)]);
        }
    }

    #[test]
    fn uniform_convergence_decreases_in_n() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let grid: Vec<DMatrix<f64>> = (0..25)
            .map(|i| DMatrix::from_element(1, 1, 0.2 + 0.05 * i as f64))
            .collect();
        let seeds: Vec<u64> = (0..5).collect();
        let rows =
            empirical_uniform_convergence(&m, &eye(1), &grid, &[100, 1000, 10_000], &seeds).unwrap();
        let mut inversions = 0;
        for pair in rows.windows(2) {
            if pair[1].sup_value_dev > pair[0].sup_value_dev {
                inversions += 1;
            }
            if pair[1].sup_grad_dev > pair[0].sup_grad_dev {
                inversions += 1;
            }
        }
        assert!(inversions <= 1, "rows: {:?}", rows);
    }

    #[test]
    fn mle_value_cases() {
        // Scalar residuals (., 1, -1), S = 1: value = 1 + log 1 = 1.
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let data = scalar_data(&[0.0, 1.0, -1.0]);
        let ext = ExtendedData::new(data.clone(), vec![DMatrix::zeros(1, 0); 3]).unwrap();
        let theta = MleParams {
            beta: nalgebra::DVector::zeros(0),
            l: m.l_star.clone(),
            s: DMatrix::from_element(1, 1, 1.0),
        };
        assert_abs_diff_eq!(mle_value(&theta, &m.plant, &ext).unwrap(), 1.0, epsilon = 1e-14);

        // n_beta = 0, S = W^{-1}: mle = pem_value + logdet(W^{-1}).
        let w = DMatrix::from_element(1, 1, 2.0);
        let theta = MleParams {
            beta: nalgebra::DVector::zeros(0),
            l: DMatrix::from_element(1, 1, 0.6),
            s: w.clone().try_inverse().unwrap(),
        };
        let lhs = mle_value(&theta, &m.plant, &ext).unwrap();
        let rhs = pem_value(&theta.l, &m.plant, &data, &w).unwrap() + (1.0f64 / 2.0).ln();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn mle_minimized_at_sample_covariance() {
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let noise = NoiseSpec::gaussian(&DMatrix::from_element(1, 1, 1.3), 31);
        let (data, _) =
            model::simulate_innovation(&m, &model::zero_inputs(0, 500), &noise).unwrap();
        let ext = ExtendedData::new(data, vec![DMatrix::zeros(1, 0); 500]).unwrap();
        let l = DMatrix::from_element(1, 1, 0.7);
        let theta = MleParams {
            beta: nalgebra::DVector::zeros(0),
            l: l.clone(),
            s: DMatrix::from_element(1, 1, 1.0),
        };
        let (_, s_hat) = mle_partial_updates(&theta, &m.plant, &ext).unwrap();
        let at_hat = mle_value(
            &MleParams { beta: nalgebra::DVector::zeros(0), l: l.clone(), s: s_hat.clone() },
            &m.plant,
            &ext,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..20 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let perturbed = &s_hat * (1.0 + 0.3 * z).max(0.05);
            let v = mle_value(
                &MleParams { beta: nalgebra::DVector::zeros(0), l: l.clone(), s: perturbed },
                &m.plant,
                &ext,
            )
            .unwrap();
            assert!(at_hat <= v + 1e-12);
        }
    }

    #[test]
    fn s_update_of_unit_residuals() {
        // Residuals at truth equal innovations; innovations (., 1, -1) give
        // sample covariance 1.
        let m = scalar_model(0.9, 1.0, 0.8, 1.0);
        let data = scalar_data(&[0.3, 1.0, -1.0]);
        let ext = ExtendedData::new(data, vec![DMatrix::zeros(1, 0); 3]).unwrap();
        let theta = MleParams {
            beta: nalgebra::DVector::zeros(0),
            l: m.l_star.clone(),
            s: DMatrix::from_element(1, 1, 1.0),
        };
        let (_, s_hat) = mle_partial_updates(&theta, &m.plant, &ext).unwrap();
        assert_abs_diff_eq!(s_hat[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn beta_update_recovers_truth_on_noiseless_data() {
        let (plant, _) = model::build_three_state(0.1, 0.1, 0.9).unwrap();
        let l = DMatrix::zeros(3, 2);
        let beta_star = nalgebra::DVector::from_vec(vec![0.4, -1.1]);
        let count = 60;
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let phi: Vec<DMatrix<f64>> = (0..count)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| -> f64 { StandardNormal.sample(&mut rng) }))
            .collect();
        let mut x = nalgebra::DVector::zeros(3);
        let mut y = Vec::new();
        for k in 0..count {
            y.push(&plant.c * &x);
            x = &plant.a * &x + &phi[k] * &beta_star;
        }
        let data = Dataset::new(model::zero_inputs(0, count), y).unwrap();
        let ext = ExtendedData::new(data, phi).unwrap();
        let theta = MleParams { beta: nalgebra::DVector::zeros(2), l, s: eye(2) };
        let (beta_hat, _) = mle_partial_updates(&theta, &plant, &ext).unwrap();
        assert!((beta_hat - beta_star).norm() < 1e-8);
    }

    #[test]
    fn beta_update_matches_dense_normal_equations() {
        let (plant, _) = model::build_three_state(0.1, 0.1, 0.9).unwrap();
        let innov = {
            let g = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
            let q_proc = &g * g.transpose();
            crate::riccati::to_innovation_form(&plant, &q_proc, &eye(2)).unwrap()
        };
        let count = 80;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let phi: Vec<DMatrix<f64>> = (0..count)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| -> f64 { StandardNormal.sample(&mut rng) }))
            .collect();
        let noise = NoiseSpec::gaussian(&innov.s_star, 22);
        let (data, _) =
            model::simulate_innovation(&innov, &model::zero_inputs(0, count), &noise).unwrap();
        let ext = ExtendedData::new(data, phi.clone()).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.4, 0.2, 0.2, 0.9]);
        let theta = MleParams { beta: nalgebra::DVector::zeros(2), l: innov.l_star.clone(), s: s.clone() };
        let (beta_hat, _) = mle_partial_updates(&theta, &plant, &ext).unwrap();

        // Dense oracle: stack all weighted rows and solve the full LS problem.
        let s_inv = s.try_inverse().unwrap();
        let chol = s_inv.cholesky().unwrap();
        let root = chol.l().transpose();
        let m = &plant.a - &innov.l_star * &plant.c;
        let (_, r0) = predict_states_extended(&plant, &nalgebra::DVector::zeros(0), &innov.l_star, &ext).unwrap();
        let horizon = count - 1;
        let mut rows = DMatrix::<f64>::zeros(2 * horizon, 2);
        let mut rhs = nalgebra::DVector::<f64>::zeros(2 * horizon);
        let mut t = DMatrix::<f64>::zeros(3, 2);
        for k in 0..=horizon {
            if k >= 1 {
                let block = &root * &plant.c * &t;
                rows.view_mut((2 * (k - 1), 0), (2, 2)).copy_from(&block);
                rhs.rows_mut(2 * (k - 1), 2).copy_from(&(&root * &r0[k]));
            }
            if k < horizon {
                t = &m * &t + &ext.phi[k];
            }
        }
        let oracle = (rows.transpose() * &rows)
            .try_inverse()
            .unwrap()
            * rows.transpose()
            * rhs;
        assert!((beta_hat - oracle).norm() < 1e-8);
    }
}
