//! Innovation-form LTI system, data simulation and the one-step predictor.
//!
//! The system is
//!
//! ```text
//! x_{k+1} = A x_k + B u_k + L* e_k,      y_k = C x_k + e_k,
//! ```
//!
//! with known (A, B, C, x0) and unknown gain L*. Every objective in this
//! crate is built on `predict_states`, the Kalman predictor recursion at a
//! candidate gain L.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stability::spectral_radius;

/// Known plant matrices and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl StateSpaceModel {
    /// Validates dimensions, full row rank of C and observability of (A, C).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B must have {} rows, got {}",
                n,
                b.nrows()
            )));
        }
        let q = c.nrows();
        if q == 0 || c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "C must be q x {} with q >= 1, got {}x{}",
                n,
                c.nrows(),
                c.ncols()
            )));
        }
        if x0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x0 must have length {}, got {}",
                n,
                x0.len()
            )));
        }
        if c.rank(1e-10) != q {
            return Err(Error::InvalidParameter("C is not full row rank".into()));
        }
        let model = Self { a, b, c, x0 };
        if !model.is_observable() {
            return Err(Error::InvalidParameter("(A, C) is not observable".into()));
        }
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Rank test on the stacked observability matrix [C; CA; ...; CA^{n-1}].
    pub fn is_observable(&self) -> bool {
        let n = self.state_dim();
        let q = self.output_dim();
        let mut obs = DMatrix::zeros(n * q, n);
        let mut block = self.c.clone();
        for i in 0..n {
            obs.view_mut((i * q, 0), (q, n)).copy_from(&block);
            block = &block * &self.a;
        }
        obs.rank(1e-10) == n
    }
}

/// Plant plus the true gain and innovation covariance; the data generator.
#[derive(Debug, Clone)]
pub struct InnovationModel {
    pub plant: StateSpaceModel,
    pub l_star: DMatrix<f64>,
    pub s_star: DMatrix<f64>,
}

impl InnovationModel {
    pub fn new(plant: StateSpaceModel, l_star: DMatrix<f64>, s_star: DMatrix<f64>) -> Result<Self> {
        let (n, q) = (plant.state_dim(), plant.output_dim());
        if l_star.nrows() != n || l_star.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "L* must be {}x{}, got {}x{}",
                n,
                q,
                l_star.nrows(),
                l_star.ncols()
            )));
        }
        if s_star.nrows() != q || s_star.ncols() != q {
            return Err(Error::DimensionMismatch("S* must be q x q".into()));
        }
        if s_star.clone().cholesky().is_none() {
            return Err(Error::SingularInnovationCov);
        }
        let m = &plant.a - &l_star * &plant.c;
        let rho = spectral_radius(&m);
        if rho >= 1.0 {
            return Err(Error::UnstableMatrix { rho });
        }
        Ok(Self { plant, l_star, s_star })
    }
}

/// Recorded input/output sequences, k = 0..N (N + 1 samples each).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "u and y must have equal length, got {} and {}",
                u.len(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::DimensionMismatch("dataset must be non-empty".into()));
        }
        for (k, v) in u.iter().chain(y.iter()).enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { step: k });
            }
        }
        Ok(Self { u, y })
    }

    /// N, the index of the last sample (the cost sums k = 1..N).
    pub fn horizon(&self) -> usize {
        self.y.len() - 1
    }
}

/// Noise distribution contract: zero mean, finite fourth moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// N(0, S) with S symmetric PSD.
    Gaussian { cov: Vec<Vec<f64>> },
    /// Scalar: N(0, sigma2) with probability p_hit, exactly 0 otherwise.
    Mixture { p_hit: f64, sigma2: f64 },
    /// Identically zero (dimension must be given).
    Zero { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(cov: &DMatrix<f64>, seed: u64) -> Self {
        let rows = (0..cov.nrows())
            .map(|i| cov.row(i).iter().copied().collect())
            .collect();
        Self { kind: NoiseKind::Gaussian { cov: rows }, seed }
    }

    pub fn mixture(p_hit: f64, sigma2: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Mixture { p_hit, sigma2 }, seed }
    }

    pub fn zero(dim: usize, seed: u64) -> Self {
        Self { kind: NoiseKind::Zero { dim }, seed }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            NoiseKind::Gaussian { cov } => cov.len(),
            NoiseKind::Mixture { .. } => 1,
            NoiseKind::Zero { dim } => *dim,
        }
    }

    /// Draws `count` samples deterministically from the stored seed.
    pub fn draw(&self, count: usize) -> Result<Vec<DVector<f64>>> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        self.draw_with(&mut rng, count)
    }

    pub fn draw_with(&self, rng: &mut ChaCha12Rng, count: usize) -> Result<Vec<DVector<f64>>> {
        match &self.kind {
            NoiseKind::Gaussian { cov } => {
                let d = cov.len();
                let s = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
                if (&s - s.transpose()).abs().max() > 1e-9 {
                    return Err(Error::InvalidParameter("gaussian covariance not symmetric".into()));
                }
                // PSD factor; cholesky fails on semi-definite S, fall back to eigen.
                let factor = match s.clone().cholesky() {
                    Some(chol) => chol.l(),
                    None => {
                        let eig = s.symmetric_eigen();
                        for ev in eig.eigenvalues.iter() {
                            if *ev < -1e-10 {
                                return Err(Error::InvalidParameter(
                                    "gaussian covariance not PSD".into(),
                                ));
                            }
                        }
                        let sqrt = DMatrix::from_diagonal(
                            &eig.eigenvalues.map(|ev| ev.max(0.0).sqrt()),
                        );
                        &eig.eigenvectors * sqrt
                    }
                };
                Ok((0..count)
                    .map(|_| {
                        let z = DVector::from_fn(d, |_, _| -> f64 { StandardNormal.sample(rng) });
                        &factor * z
                    })
                    .collect())
            }
            NoiseKind::Mixture { p_hit, sigma2 } => {
                if !(*p_hit > 0.0 && *p_hit <= 1.0) || !(*sigma2 > 0.0) {
                    return Err(Error::InvalidParameter(
                        "mixture requires 0 < p_hit <= 1 and sigma2 > 0".into(),
                    ));
                }
                let sigma = sigma2.sqrt();
                Ok((0..count)
                    .map(|_| {
                        let hit: f64 = rng.gen();
                        let v = if hit < *p_hit {
                            let z: f64 = StandardNormal.sample(rng);
                            sigma * z
                        } else {
                            0.0
                        };
                        DVector::from_element(1, v)
                    })
                    .collect())
            }
            NoiseKind::Zero { dim } => Ok((0..count).map(|_| DVector::zeros(*dim)).collect()),
        }
    }
}

/// Dataset with known regression matrices for the linearly-entering parameters.
#[derive(Debug, Clone)]
pub struct ExtendedData {
    pub base: Dataset,
    pub phi: Vec<DMatrix<f64>>,
}

impl ExtendedData {
    pub fn new(base: Dataset, phi: Vec<DMatrix<f64>>) -> Result<Self> {
        if phi.len() != base.y.len() {
            return Err(Error::DimensionMismatch(format!(
                "Phi length {} must match dataset length {}",
                phi.len(),
                base.y.len()
            )));
        }
        Ok(Self { base, phi })
    }

    pub fn n_beta(&self) -> usize {
        self.phi.first().map_or(0, |m| m.ncols())
    }
}

fn check_finite(v: &DVector<f64>, step: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    Ok(())
}

/// Simulates the innovation form driven by drawn innovations e_k.
///
/// Returns the dataset and the innovations so that oracle tests can check
/// the generator/predictor duality exactly.
pub fn simulate_innovation(
    model: &InnovationModel,
    inputs: &[DVector<f64>],
    noise: &NoiseSpec,
) -> Result<(Dataset, Vec<DVector<f64>>)> {
    let plant = &model.plant;
    let q = plant.output_dim();
    if noise.dim() != q {
        return Err(Error::DimensionMismatch(format!(
            "noise produces {}-vectors, output dim is {}",
            noise.dim(),
            q
        )));
    }
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != plant.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input {} has length {}, expected {}",
                k,
                u.len(),
                plant.input_dim()
            )));
        }
    }
    let count = inputs.len();
    let innovations = noise.draw(count)?;
    let mut x = plant.x0.clone();
    let mut y = Vec::with_capacity(count);
    for k in 0..count {
        let e = &innovations[k];
        let yk = &plant.c * &x + e;
        check_finite(&yk, k)?;
        y.push(yk);
        x = &plant.a * &x + &plant.b * &inputs[k] + &model.l_star * e;
        check_finite(&x, k)?;
    }
    let data = Dataset::new(inputs.to_vec(), y)?;
    Ok((data, innovations))
}

/// Simulates the physical form x_{k+1} = A x + B u + G w, y = C x + v.
pub fn simulate_physical(
    plant: &StateSpaceModel,
    g: &DMatrix<f64>,
    process_noise: &NoiseSpec,
    meas_noise: &NoiseSpec,
    inputs: &[DVector<f64>],
) -> Result<Dataset> {
    let n = plant.state_dim();
    let q = plant.output_dim();
    if g.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "G must have {} rows, got {}",
            n,
            g.nrows()
        )));
    }
    if process_noise.dim() != g.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "process noise dim {} does not match G columns {}",
            process_noise.dim(),
            g.ncols()
        )));
    }
    if meas_noise.dim() != q {
        return Err(Error::DimensionMismatch(format!(
            "measurement noise dim {} does not match output dim {}",
            meas_noise.dim(),
            q
        )));
    }
    let count = inputs.len();
    let w = process_noise.draw(count)?;
    let v = meas_noise.draw(count)?;
    let mut x = plant.x0.clone();
    let mut y = Vec::with_capacity(count);
    for k in 0..count {
        let yk = &plant.c * &x + &v[k];
        check_finite(&yk, k)?;
        y.push(yk);
        x = &plant.a * &x + &plant.b * &inputs[k] + g * &w[k];
        check_finite(&x, k)?;
    }
    Dataset::new(inputs.to_vec(), y)
}

/// One-step Kalman predictor at gain L.
///
/// x̂_0 = x0, x̂_{k+1} = A x̂_k + B u_k + L (y_k - C x̂_k), r_k = y_k - C x̂_k.
/// Unstable A - LC is allowed; errors only if a value overflows to non-finite.
pub fn predict_states(
    plant: &StateSpaceModel,
    gain: &DMatrix<f64>,
    data: &Dataset,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let phi = vec![DMatrix::<f64>::zeros(plant.state_dim(), 0); data.y.len()];
    let ext = ExtendedData { base: data.clone(), phi };
    predict_states_extended(plant, &DVector::zeros(0), gain, &ext)
}

/// Predictor with the extra linearly-entering term Phi_k beta in the update.
pub fn predict_states_extended(
    plant: &StateSpaceModel,
    beta: &DVector<f64>,
    gain: &DMatrix<f64>,
    ext: &ExtendedData,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = plant.state_dim();
    let q = plant.output_dim();
    if gain.nrows() != n || gain.ncols() != q {
        return Err(Error::DimensionMismatch(format!(
            "gain must be {}x{}, got {}x{}",
            n,
            q,
            gain.nrows(),
            gain.ncols()
        )));
    }
    let data = &ext.base;
    let count = data.y.len();
    let mut xhat = Vec::with_capacity(count);
    let mut residuals = Vec::with_capacity(count);
    let mut x = plant.x0.clone();
    for k in 0..count {
        if data.y[k].len() != q {
            return Err(Error::DimensionMismatch(format!("y_{} has wrong length", k)));
        }
        let r = &data.y[k] - &plant.c * &x;
        let drive = if beta.is_empty() {
            DVector::zeros(n)
        } else {
            if ext.phi[k].ncols() != beta.len() || ext.phi[k].nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "Phi_{} is {}x{}, expected {}x{}",
                    k,
                    ext.phi[k].nrows(),
                    ext.phi[k].ncols(),
                    n,
                    beta.len()
                )));
            }
            &ext.phi[k] * beta
        };
        let next = &plant.a * &x + &plant.b * &data.u[k] + drive + gain * &r;
        check_finite(&next, k)?;
        xhat.push(x);
        residuals.push(r);
        x = next;
    }
    Ok((xhat, residuals))
}

/// Exact zero-order-hold discretization of q̈ = -μ q̇ + f, state [q, q̇].
pub fn discretize_particle(mu: f64, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(mu > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "discretize_particle requires mu > 0 and dt > 0, got mu = {}, dt = {}",
            mu, dt
        )));
    }
    let x = mu * dt;
    let em = (-x).exp();
    // s = ∫_0^dt e^{-μτ} dτ = (1 - e^{-x})/μ and (dt - s)/μ = (x - 1 + e^{-x})/μ²
    // both cancel catastrophically for small x, so switch to their series there.
    let (s, ds) = if x < 1e-3 {
        let s = dt * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0 + x * x * x * x / 120.0);
        let ds = dt * dt
            * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0 + x * x * x * x / 720.0);
        (s, ds)
    } else {
        let s = -(-x).exp_m1() / mu;
        (s, (dt - s) / mu)
    };
    let a_d = DMatrix::from_row_slice(2, 2, &[1.0, s, 0.0, em]);
    let b_f = DMatrix::from_row_slice(2, 1, &[ds, s]);
    Ok((a_d, b_f))
}

/// Three-state particle with a first-order stochastic force, measuring
/// acceleration and position. Returns the plant and the process-noise
/// channel G (the noise enters only the force state).
pub fn build_three_state(mu: f64, dt: f64, a_f: f64) -> Result<(StateSpaceModel, DMatrix<f64>)> {
    if a_f.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!("|a_f| must be < 1, got {}", a_f)));
    }
    let (a_d, b_f) = discretize_particle(mu, dt)?;
    let mut a = DMatrix::zeros(3, 3);
    a.view_mut((0, 0), (2, 2)).copy_from(&a_d);
    a.view_mut((0, 2), (2, 1)).copy_from(&b_f);
    a[(2, 2)] = a_f;
    let b = DMatrix::zeros(3, 0);
    // y1 = q̈ = -μ q̇ + f at the sample instant, y2 = q.
    let c = DMatrix::from_row_slice(2, 3, &[0.0, -mu, 1.0, 1.0, 0.0, 0.0]);
    let g = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let plant = StateSpaceModel::new(a, b, c, DVector::zeros(3))?;
    Ok((plant, g))
}

/// Convenience: generates a deterministic pseudo-random input sequence.
pub fn random_inputs(p: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_fn(p, |_, _| -> f64 { StandardNormal.sample(&mut rng) }))
        .collect()
}

/// Convenience: all-zero input sequence.
pub fn zero_inputs(p: usize, count: usize) -> Vec<DVector<f64>> {
    vec![DVector::zeros(p); count]
}
