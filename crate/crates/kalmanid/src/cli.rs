//! Experiment harness: builds the example systems, generates datasets, runs
//! the identification studies, and writes CSV/JSON outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{self, Dataset, InnovationModel, NoiseSpec, StateSpaceModel};
use crate::optimizer::{self, SolveOptions};
use crate::pem;
use crate::riccati;
use crate::stability;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    OneDim,
    TwoState,
    ThreeState,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSpec {
    Identity,
    Matrix(Vec<Vec<f64>>),
}

fn default_mu() -> f64 {
    0.1
}
fn default_dt() -> f64 {
    0.1
}
fn default_sigma_f() -> f64 {
    10.0
}
fn default_sigma_v() -> f64 {
    1.0
}
fn default_a_f() -> f64 {
    0.9
}
fn default_p_hit() -> f64 {
    0.1
}
fn default_sigma_w2() -> f64 {
    10.0
}
fn default_cov_v_acc() -> f64 {
    1.0
}
fn default_cov_v_pos() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    0.02
}
fn default_w() -> WeightSpec {
    WeightSpec::Identity
}
fn default_n_list() -> Vec<usize> {
    vec![100, 1000, 10_000]
}
fn default_n_seeds() -> usize {
    10
}
fn default_n_starts() -> usize {
    50
}

/// Full experiment description. Defaults are the figure-caption values of
/// the three built-in examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub example: ExampleKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_sigma_f")]
    pub sigma_f: f64,
    #[serde(default = "default_sigma_v")]
    pub sigma_v: f64,
    #[serde(default = "default_a_f")]
    pub a_f: f64,
    #[serde(default = "default_p_hit")]
    pub p_hit: f64,
    #[serde(default = "default_sigma_w2")]
    pub sigma_w2: f64,
    #[serde(default = "default_cov_v_acc")]
    pub cov_v_acc: f64,
    #[serde(default = "default_cov_v_pos")]
    pub cov_v_pos: f64,
    /// Custom example matrices (row-major), required when example = custom.
    #[serde(default)]
    pub a_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub c_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub g_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub q_proc: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub r_meas: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_w")]
    pub w: WeightSpec,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_n_starts")]
    pub n_starts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Use a seeded random input instead of u = 0 (exercises input
    /// invariance; requires p >= 1).
    #[serde(default)]
    pub random_inputs: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn example_default(example: ExampleKind) -> Self {
        Self {
            example,
            mu: default_mu(),
            dt: default_dt(),
            sigma_f: default_sigma_f(),
            sigma_v: default_sigma_v(),
            a_f: default_a_f(),
            p_hit: default_p_hit(),
            sigma_w2: default_sigma_w2(),
            cov_v_acc: default_cov_v_acc(),
            cov_v_pos: default_cov_v_pos(),
            a_mat: None,
            b_mat: None,
            c_mat: None,
            x0: None,
            g_mat: None,
            q_proc: None,
            r_meas: None,
            alpha: default_alpha(),
            w: default_w(),
            n_list: default_n_list(),
            n_seeds: default_n_seeds(),
            n_starts: default_n_starts(),
            seed: 0,
            random_inputs: false,
            output_dir: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::Config("n_list must be non-empty".into()));
        }
        if self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("n_list must be strictly ascending".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.example == ExampleKind::Custom
            && (self.a_mat.is_none()
                || self.c_mat.is_none()
                || self.q_proc.is_none()
                || self.r_meas.is_none())
        {
            return Err(Error::Config(
                "custom example requires a_mat, c_mat, q_proc and r_meas".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, for report reproducibility.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn to_dmatrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::Config(format!("{} must be non-empty", what)));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{} rows have unequal lengths", what)));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// An example system resolved to a simulator plus DARE ground truth.
pub struct ExperimentSystem {
    pub plant: StateSpaceModel,
    pub innovation: InnovationModel,
    /// Process-noise channel, when data are generated in physical form.
    pub physical: Option<PhysicalNoise>,
    pub w: DMatrix<f64>,
}

pub struct PhysicalNoise {
    pub g: DMatrix<f64>,
    pub process: NoiseKindSpec,
    pub meas_cov: DMatrix<f64>,
}

/// Noise family for the process channel; the seed is attached per dataset.
pub enum NoiseKindSpec {
    Gaussian(DMatrix<f64>),
    Mixture { p_hit: f64, sigma2: f64 },
}

impl ExperimentSystem {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        let sys = match config.example {
            ExampleKind::OneDim => {
                let plant = StateSpaceModel::new(
                    DMatrix::from_element(1, 1, 0.9),
                    DMatrix::zeros(1, 0),
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::zeros(1),
                )?;
                let innovation = InnovationModel::new(
                    plant.clone(),
                    DMatrix::from_element(1, 1, 0.8),
                    DMatrix::from_element(1, 1, 1.0),
                )?;
                Self { plant, innovation, physical: None, w: DMatrix::identity(1, 1) }
            }
            ExampleKind::TwoState => {
                let (a_d, b_f) = model::discretize_particle(config.mu, config.dt)?;
                let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
                let plant =
                    StateSpaceModel::new(a_d, DMatrix::zeros(2, 0), c, DVector::zeros(2))?;
                let sf2 = config.sigma_f * config.sigma_f;
                let q_proc = &b_f * b_f.transpose() * sf2;
                let r = DMatrix::from_element(1, 1, config.sigma_v * config.sigma_v);
                let innovation = riccati::to_innovation_form(&plant, &q_proc, &r)?;
                let physical = PhysicalNoise {
                    g: b_f,
                    process: NoiseKindSpec::Gaussian(DMatrix::from_element(1, 1, sf2)),
                    meas_cov: r,
                };
                Self { plant, innovation, physical: Some(physical), w: DMatrix::identity(1, 1) }
            }
            ExampleKind::ThreeState => {
                let (plant, g) = model::build_three_state(config.mu, config.dt, config.a_f)?;
                let var_w = config.p_hit * config.sigma_w2;
                let q_proc = &g * g.transpose() * var_w;
                let r = DMatrix::from_diagonal(&DVector::from_vec(vec![
                    config.cov_v_acc,
                    config.cov_v_pos,
                ]));
                let innovation = riccati::to_innovation_form(&plant, &q_proc, &r)?;
                let physical = PhysicalNoise {
                    g,
                    process: NoiseKindSpec::Mixture {
                        p_hit: config.p_hit,
                        sigma2: config.sigma_w2,
                    },
                    meas_cov: r,
                };
                Self { plant, innovation, physical: Some(physical), w: DMatrix::identity(2, 2) }
            }
            ExampleKind::Custom => {
                let a = to_dmatrix(config.a_mat.as_ref().unwrap(), "a_mat")?;
                let n = a.nrows();
                let b = match &config.b_mat {
                    Some(rows) => to_dmatrix(rows, "b_mat")?,
                    None => DMatrix::zeros(n, 0),
                };
                let c = to_dmatrix(config.c_mat.as_ref().unwrap(), "c_mat")?;
                let x0 = match &config.x0 {
                    Some(v) => DVector::from_vec(v.clone()),
                    None => DVector::zeros(n),
                };
                let q_dim = c.nrows();
                let plant = StateSpaceModel::new(a, b, c, x0)?;
                let q_proc = to_dmatrix(config.q_proc.as_ref().unwrap(), "q_proc")?;
                let r = to_dmatrix(config.r_meas.as_ref().unwrap(), "r_meas")?;
                let g = match &config.g_mat {
                    Some(rows) => to_dmatrix(rows, "g_mat")?,
                    None => DMatrix::identity(n, n),
                };
                // Q_proc is the covariance of w; the state sees G Q_proc G^T.
                let full_q = &g * &q_proc * g.transpose();
                let innovation = riccati::to_innovation_form(&plant, &full_q, &r)?;
                let physical = PhysicalNoise {
                    g,
                    process: NoiseKindSpec::Gaussian(q_proc),
                    meas_cov: r,
                };
                Self { plant, innovation, physical: Some(physical), w: DMatrix::identity(q_dim, q_dim) }
            }
        };
        let w = match &config.w {
            WeightSpec::Identity => sys.w.clone(),
            WeightSpec::Matrix(rows) => to_dmatrix(rows, "w")?,
        };
        Ok(Self { w, ..sys })
    }

    /// Generates one dataset of horizon N with a derived seed.
    pub fn generate(&self, n: usize, seed: u64, random_inputs: bool) -> Result<Dataset> {
        let p = self.plant.input_dim();
        let inputs = if random_inputs && p > 0 {
            model::random_inputs(p, n + 1, seed ^ 0x5EED)
        } else {
            model::zero_inputs(p, n + 1)
        };
        match &self.physical {
            Some(phys) => {
                let process = match &phys.process {
                    NoiseKindSpec::Gaussian(cov) => NoiseSpec::gaussian(cov, seed),
                    NoiseKindSpec::Mixture { p_hit, sigma2 } => {
                        NoiseSpec::mixture(*p_hit, *sigma2, seed)
                    }
                };
                let meas = NoiseSpec::gaussian(&phys.meas_cov, seed.wrapping_add(0x00A5_17E5));
                model::simulate_physical(&self.plant, &phys.g, &process, &meas, &inputs)
            }
            None => {
                let noise = NoiseSpec::gaussian(&self.innovation.s_star, seed);
                Ok(model::simulate_innovation(&self.innovation, &inputs, &noise)?.0)
            }
        }
    }
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Writes the dataset CSV: header `k,u0..,y0..`, one row per k = 0..N.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let p = data.u[0].len();
    let q = data.y[0].len();
    let mut out = String::new();
    out.push('k');
    for j in 0..p {
        out.push_str(&format!(",u{}", j));
    }
    for j in 0..q {
        out.push_str(&format!(",y{}", j));
    }
    out.push('\n');
    for k in 0..data.y.len() {
        out.push_str(&k.to_string());
        for j in 0..p {
            out.push(',');
            out.push_str(&fmt17(data.u[k][j]));
        }
        for j in 0..q {
            out.push(',');
            out.push_str(&fmt17(data.y[k][j]));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a dataset CSV written by `write_dataset_csv`.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Malformed { line: 1, reason: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"k") {
        return Err(Error::Malformed { line: 1, reason: "header must start with 'k'".into() });
    }
    let p = cols.iter().filter(|c| c.starts_with('u')).count();
    let q = cols.iter().filter(|c| c.starts_with('y')).count();
    if q == 0 || cols.len() != 1 + p + q {
        return Err(Error::Malformed { line: 1, reason: format!("unexpected header '{}'", header) });
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + p + q {
            return Err(Error::Malformed {
                line: line_no,
                reason: format!("expected {} fields, got {}", 1 + p + q, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Malformed {
                line: line_no,
                reason: format!("'{}' is not a number", s),
            })
        };
        let k: usize = fields[0].trim().parse().map_err(|_| Error::Malformed {
            line: line_no,
            reason: format!("'{}' is not a sample index", fields[0]),
        })?;
        if k != u.len() {
            return Err(Error::Malformed {
                line: line_no,
                reason: format!("sample index {} out of order", k),
            });
        }
        let mut uk = DVector::zeros(p);
        for j in 0..p {
            uk[j] = parse(fields[1 + j])?;
        }
        let mut yk = DVector::zeros(q);
        for j in 0..q {
            yk[j] = parse(fields[1 + p + j])?;
        }
        u.push(uk);
        y.push(yk);
    }
    Dataset::new(u, y)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub l_star: Vec<Vec<f64>>,
    pub s_star: Vec<Vec<f64>>,
    pub alpha_default: f64,
    pub seed: u64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// `simulate`: dataset CSV plus metadata sidecar with the DARE ground truth.
pub fn cmd_simulate(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let system = ExperimentSystem::from_config(config)?;
    fs::create_dir_all(out_dir)?;
    let n = *config.n_list.last().expect("validated non-empty");
    let data = system.generate(n, config.seed, config.random_inputs)?;
    let csv_path = out_dir.join("dataset.csv");
    write_dataset_csv(&csv_path, &data)?;
    let meta = DatasetMeta {
        a: matrix_rows(&system.plant.a),
        b: matrix_rows(&system.plant.b),
        c: matrix_rows(&system.plant.c),
        x0: system.plant.x0.iter().copied().collect(),
        l_star: matrix_rows(&system.innovation.l_star),
        s_star: matrix_rows(&system.innovation.s_star),
        alpha_default: config.alpha,
        seed: config.seed,
    };
    write_json(&out_dir.join("dataset.meta.json"), &meta)?;
    Ok(csv_path)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    pub representative: Vec<Vec<f64>>,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub config_hash: String,
    pub seed: u64,
    pub n: usize,
    pub clusters: Vec<ClusterReport>,
    pub l_hat: Vec<Vec<f64>>,
    pub value: f64,
    pub grad_norm: f64,
    pub converged_starts: usize,
    pub failed_starts: usize,
    pub dist_to_l_star: Option<f64>,
}

fn solve_options(config: &ExperimentConfig) -> SolveOptions {
    SolveOptions { alpha: config.alpha, ..SolveOptions::default() }
}

/// `identify`: multi-start fit on a dataset file, JSON report out.
pub fn cmd_identify(
    config: &ExperimentConfig,
    dataset: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let system = ExperimentSystem::from_config(config)?;
    let data = read_dataset_csv(dataset)?;
    fs::create_dir_all(out_dir)?;
    let opts = solve_options(config);
    let result =
        optimizer::multi_start(&system.plant, &data, &system.w, config.n_starts, config.seed, &opts)?;
    let best = result
        .clusters
        .iter()
        .min_by(|a, b| a.value.partial_cmp(&b.value).expect("finite values"))
        .ok_or_else(|| Error::InfeasibleStart("no start converged".into()))?;
    // Prefer the ground truth from the sidecar when present.
    let meta_path = dataset.with_extension("meta.json");
    let l_star = if meta_path.exists() {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        Some(to_dmatrix(&meta.l_star, "meta l_star")?)
    } else {
        None
    };
    let grad_norm = result
        .outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().ok())
        .find(|f| (&f.l_hat - &best.representative).norm() < 1e-12)
        .map_or(f64::NAN, |f| f.grad_norm);
    let report = IdentifyReport {
        config_hash: config.hash(),
        seed: config.seed,
        n: data.horizon(),
        clusters: result
            .clusters
            .iter()
            .map(|c| ClusterReport {
                representative: matrix_rows(&c.representative),
                value: c.value,
                count: c.count,
            })
            .collect(),
        l_hat: matrix_rows(&best.representative),
        value: best.value,
        grad_norm,
        converged_starts: result
            .outcomes
            .iter()
            .filter(|o| o.result.as_ref().map_or(false, |f| f.converged))
            .count(),
        failed_starts: result.outcomes.iter().filter(|o| o.result.is_err()).count(),
        dist_to_l_star: l_star.map(|ls| (&best.representative - ls).norm()),
    };
    let path = out_dir.join("identify.json");
    write_json(&path, &report)?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LandscapeMeta {
    pub config_hash: String,
    pub seed: u64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub unstable_below: f64,
    pub unstable_above: f64,
    pub local_minima_largest_n: usize,
}

/// `landscape`: 1-D (L, V_N per N, V̄) table over a gain grid.
pub fn cmd_landscape(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let system = ExperimentSystem::from_config(config)?;
    let n_dim = system.plant.state_dim();
    let q_dim = system.plant.output_dim();
    if n_dim != 1 || q_dim != 1 {
        return Err(Error::UnsupportedDimension { n: n_dim, q: q_dim });
    }
    fs::create_dir_all(out_dir)?;
    let a = system.plant.a[(0, 0)];
    let c = system.plant.c[(0, 0)];
    // Stable iff |A - LC| < 1.
    let lo_boundary = (a - 1.0) / c;
    let hi_boundary = (a + 1.0) / c;
    let margin = 0.1 * (hi_boundary - lo_boundary);
    let grid_min = lo_boundary - margin;
    let grid_max = hi_boundary + margin;
    let steps = 200usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| grid_min + (grid_max - grid_min) * i as f64 / steps as f64)
        .collect();

    let datasets: Vec<(usize, Dataset)> = config
        .n_list
        .iter()
        .map(|&n| Ok((n, system.generate(n, config.seed, config.random_inputs)?)))
        .collect::<Result<_>>()?;

    let mut out = String::from("L,stable");
    for (n, _) in &datasets {
        out.push_str(&format!(",VN_{}", n));
    }
    out.push_str(",Vbar\n");
    let mut largest_n_values = Vec::new();
    for &l in &grid {
        let gain = DMatrix::from_element(1, 1, l);
        let stable = (a - l * c).abs() < 1.0;
        out.push_str(&fmt17(l));
        out.push_str(if stable { ",1" } else { ",0" });
        for (i, (_, data)) in datasets.iter().enumerate() {
            let v = if stable {
                pem::pem_value(&gain, &system.plant, data, &system.w).unwrap_or(f64::INFINITY)
            } else {
                f64::INFINITY
            };
            out.push(',');
            out.push_str(&fmt17(v));
            if i + 1 == datasets.len() {
                largest_n_values.push(if stable { v } else { f64::INFINITY });
            }
        }
        let v_bar = if stable {
            pem::asymptotic_eval(&gain, &system.innovation, &system.w)?.v_bar
        } else {
            f64::INFINITY
        };
        out.push(',');
        out.push_str(&fmt17(v_bar));
        out.push('\n');
    }
    let csv_path = out_dir.join("landscape.csv");
    fs::write(&csv_path, out)?;

    let meta = LandscapeMeta {
        config_hash: config.hash(),
        seed: config.seed,
        grid_min,
        grid_max,
        unstable_below: lo_boundary,
        unstable_above: hi_boundary,
        local_minima_largest_n: count_local_minima(&largest_n_values),
    };
    write_json(&out_dir.join("landscape.meta.json"), &meta)?;
    Ok(csv_path)
}

/// Strict local minimizers of a sampled curve, ignoring infinite entries.
pub fn count_local_minima(values: &[f64]) -> usize {
    let finite: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| (i, *v))
        .collect();
    let mut count = 0;
    for w in finite.windows(3) {
        // Only count interior points of contiguous finite runs.
        if w[2].0 - w[0].0 == 2 && w[1].1 < w[0].1 && w[1].1 < w[2].1 {
            count += 1;
        }
    }
    count
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_list: Vec<usize>,
    pub median_errors: Vec<f64>,
    pub loglog_slope: f64,
}

/// `consistency`: per-(N, seed) estimation errors plus the log-log slope of
/// the median error.
pub fn cmd_consistency(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let system = ExperimentSystem::from_config(config)?;
    fs::create_dir_all(out_dir)?;
    let opts = solve_options(config);
    let mut csv = String::from("N,replicate,error\n");
    let mut medians = Vec::new();
    for &n in &config.n_list {
        let mut errors = Vec::new();
        for rep in 0..config.n_seeds {
            let data_seed = config
                .seed
                .wrapping_add(1)
                .wrapping_mul(1_000_003)
                .wrapping_add((n as u64) << 20)
                .wrapping_add(rep as u64);
            let data = system.generate(n, data_seed, config.random_inputs)?;
            let l0 = stability::sample_feasible_gain(
                &system.plant,
                config.alpha,
                data_seed ^ 0xFEA5,
            )?;
            let fit = optimizer::minimize_pem(&system.plant, &data, &system.w, &l0, &opts)?;
            let err = (&fit.l_hat - &system.innovation.l_star).norm();
            if !(err.is_finite() && err > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "degenerate estimation error {} at N = {}",
                    err, n
                )));
            }
            csv.push_str(&format!("{},{},{}\n", n, rep, fmt17(err)));
            errors.push(err);
        }
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let mid = errors.len() / 2;
        let median = if errors.len() % 2 == 1 {
            errors[mid]
        } else {
            0.5 * (errors[mid - 1] + errors[mid])
        };
        medians.push(median);
    }
    let csv_path = out_dir.join("consistency.csv");
    fs::write(&csv_path, csv)?;
    let slope = loglog_slope(&config.n_list, &medians);
    let report = ConsistencyReport {
        config_hash: config.hash(),
        seed: config.seed,
        n_list: config.n_list.clone(),
        median_errors: medians,
        loglog_slope: slope,
    };
    write_json(&out_dir.join("consistency.json"), &report)?;
    Ok(csv_path)
}

/// Least-squares slope of log(error) against log(N).
pub fn loglog_slope(n_list: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub config_hash: String,
    pub seed: u64,
    pub properties: Vec<PropertyResult>,
    pub uniform_convergence: Vec<ConvergenceEntry>,
    pub all_pass: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConvergenceEntry {
    pub n: usize,
    pub sup_value_dev: f64,
    pub sup_grad_dev: f64,
}

/// Options for `check`; the gradient-corruption hook exists so tests can
/// verify the finite-difference property actually detects wrong gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct CheckOptions {
    pub corrupt_gradient: bool,
}

/// `check`: runs the property suite and reports pass/fail per property.
pub fn cmd_check(
    config: &ExperimentConfig,
    check_opts: &CheckOptions,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    let system = ExperimentSystem::from_config(config)?;
    fs::create_dir_all(out_dir)?;
    let mut properties = Vec::new();
    let plant = &system.plant;
    let w = &system.w;

    // Gradient of V_N against central finite differences on sampled gains.
    {
        let data = system.generate(400, config.seed, config.random_inputs)?;
        let mut worst: f64 = 0.0;
        for idx in 0..10u64 {
            let l = stability::sample_feasible_gain(plant, config.alpha, 40_000 + idx)?;
            let mut eval = pem::pem_eval(&l, plant, &data, w)?;
            if check_opts.corrupt_gradient {
                eval.gradient[(0, 0)] += 1e-3;
            }
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    let h = 1e-6 * l[(i, j)].abs().max(1.0);
                    let mut lp = l.clone();
                    lp[(i, j)] += h;
                    let mut lm = l.clone();
                    lm[(i, j)] -= h;
                    let fd = (pem::pem_value(&lp, plant, &data, w)?
                        - pem::pem_value(&lm, plant, &data, w)?)
                        / (2.0 * h);
                    let scale = fd.abs().max(eval.gradient[(i, j)].abs()).max(1e-6);
                    worst = worst.max((eval.gradient[(i, j)] - fd).abs() / scale);
                }
            }
        }
        properties.push(PropertyResult {
            name: "pem_gradient_finite_difference".into(),
            pass: worst <= 1e-5,
            detail: format!("worst relative error {:.3e}", worst),
        });
    }

    // Constraint gradient against finite differences.
    {
        let mut worst: f64 = 0.0;
        for idx in 0..10u64 {
            let l = stability::sample_feasible_gain(plant, config.alpha, 41_000 + idx)?;
            let (_, grad) = stability::constraint_value_grad(&l, plant, config.alpha)?;
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    let h = 1e-6 * l[(i, j)].abs().max(1.0);
                    let mut lp = l.clone();
                    lp[(i, j)] += h;
                    let mut lm = l.clone();
                    lm[(i, j)] -= h;
                    let (gp, _) = stability::constraint_value_grad(&lp, plant, config.alpha)?;
                    let (gm, _) = stability::constraint_value_grad(&lm, plant, config.alpha)?;
                    let fd = (gp - gm) / (2.0 * h);
                    let scale = fd.abs().max(grad[(i, j)].abs()).max(1e-8);
                    worst = worst.max((grad[(i, j)] - fd).abs() / scale);
                }
            }
        }
        properties.push(PropertyResult {
            name: "constraint_gradient_finite_difference".into(),
            pass: worst <= 1e-5,
            detail: format!("worst relative error {:.3e}", worst),
        });
    }

    // Asymptotic gradient against finite differences.
    {
        let mut worst: f64 = 0.0;
        for idx in 0..10u64 {
            let l = stability::sample_feasible_gain(plant, config.alpha, 42_000 + idx)?;
            let eval = pem::asymptotic_eval(&l, &system.innovation, w)?;
            for i in 0..l.nrows() {
                for j in 0..l.ncols() {
                    let h = 1e-6 * l[(i, j)].abs().max(1.0);
                    let mut lp = l.clone();
                    lp[(i, j)] += h;
                    let mut lm = l.clone();
                    lm[(i, j)] -= h;
                    let fd = (pem::asymptotic_eval(&lp, &system.innovation, w)?.v_bar
                        - pem::asymptotic_eval(&lm, &system.innovation, w)?.v_bar)
                        / (2.0 * h);
                    let scale = fd.abs().max(eval.grad_v_bar[(i, j)].abs()).max(1e-6);
                    worst = worst.max((eval.grad_v_bar[(i, j)] - fd).abs() / scale);
                }
            }
        }
        properties.push(PropertyResult {
            name: "asymptotic_gradient_finite_difference".into(),
            pass: worst <= 1e-5,
            detail: format!("worst relative error {:.3e}", worst),
        });
    }

    // Lyapunov and Riccati residuals.
    {
        let l = stability::sample_feasible_gain(plant, config.alpha, 43_000)?;
        let m = &plant.a - &l * &plant.c;
        let n = m.nrows();
        let p = stability::solve_dlyap(&m, &DMatrix::identity(n, n))?;
        let res = (&p - &m * &p * m.transpose() - DMatrix::identity(n, n)).abs().max();
        let pass = res <= 1e-10 * p.abs().max().max(1.0);
        properties.push(PropertyResult {
            name: "dlyap_residual".into(),
            pass,
            detail: format!("residual {:.3e}", res),
        });
    }
    {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sol = riccati::solve_dare(&one, &one, &one, &one)?;
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let err = (sol.sigma[(0, 0)] - phi).abs();
        properties.push(PropertyResult {
            name: "dare_golden_ratio".into(),
            pass: err <= 1e-6 && sol.residual(&one, &one, &one, &one) <= 1e-9,
            detail: format!("|Sigma - phi| = {:.3e}", err),
        });
    }

    // Proposition 1 bounds on sampled feasible gains.
    {
        let (gamma, lambda) = stability::stability_bounds(config.alpha)?;
        let mut violations = 0;
        for idx in 0..25u64 {
            let l = stability::sample_feasible_gain(plant, config.alpha, 44_000 + idx)?;
            if !stability::verify_uniform_stability(&l, plant, gamma, lambda, 500) {
                violations += 1;
            }
        }
        properties.push(PropertyResult {
            name: "uniform_stability_bounds".into(),
            pass: violations == 0,
            detail: format!("{} violations over 25 samples", violations),
        });
    }

    // Uniform convergence of V_N and its gradient toward the limit.
    let conv_rows = {
        let grid: Vec<DMatrix<f64>> = (0..8u64)
            .map(|idx| stability::sample_feasible_gain(plant, config.alpha, 45_000 + idx))
            .collect::<Result<_>>()?;
        let seeds: Vec<u64> = (0..config.n_seeds.min(5) as u64).map(|s| config.seed ^ s).collect();
        pem::empirical_uniform_convergence(&system.innovation, w, &grid, &config.n_list, &seeds)?
    };
    {
        let mut inversions = 0;
        for pair in conv_rows.windows(2) {
            if pair[1].sup_value_dev > pair[0].sup_value_dev {
                inversions += 1;
            }
            if pair[1].sup_grad_dev > pair[0].sup_grad_dev {
                inversions += 1;
            }
        }
        properties.push(PropertyResult {
            name: "uniform_convergence_decreasing".into(),
            pass: inversions <= 1,
            detail: format!("{} inversions across {} levels", inversions, conv_rows.len()),
        });
    }

    let all_pass = properties.iter().all(|p| p.pass);
    let report = CheckReport {
        config_hash: config.hash(),
        seed: config.seed,
        properties,
        uniform_convergence: conv_rows
            .iter()
            .map(|r| ConvergenceEntry {
                n: r.n,
                sup_value_dev: r.sup_value_dev,
                sup_grad_dev: r.sup_grad_dev,
            })
            .collect(),
        all_pass,
    };
    let path = out_dir.join("check.json");
    write_json(&path, &report)?;
    Ok(path)
}
