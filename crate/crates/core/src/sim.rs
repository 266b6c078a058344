//! Synthetic data generator and the FoSR versus two-step ISE benchmark.
//!
//! Curves are `β₀(t) + Σ x_m β_m(t) + Σ x_m b_m + Σ ζ_k φ_k(t) + ε(t)`, with
//! the missingness pattern copied from an independently drawn pool donor.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, DEFAULT_NUM_BASIS_INTERVENTION};
use crate::error::{FdaError, Result};
use crate::fosr::{self, FosrSpec, INTERCEPT};
use crate::fpca::FpcaConfig;
use crate::inference::replicate_seed;
use crate::linalg;
use crate::sample::FunctionalSample;
use crate::twostep;

/// Arms of the synthetic trial; the first is the reference.
pub const SYNTHETIC_ARMS: [&str; 4] = ["control", "individual", "collaboration", "competition"];

const POOL_SIZE: usize = 500;
const POOL_SEED: u64 = 20_160_601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCurve {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Covariates of one pool member and the grid indices at which it is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub arm: String,
    #[serde(default)]
    pub stratum: Option<String>,
    pub covariates: BTreeMap<String, f64>,
    pub missing: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub grid: Vec<f64>,
    pub intercept: Vec<f64>,
    pub varying: Vec<NamedCurve>,
    pub invariant: Vec<NamedValue>,
    /// Rows are eigenfunctions on `grid`.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub noise_variance: f64,
    pub covariate_pool: Vec<PoolRow>,
    /// Set on the shipped truths, which are invented rather than estimated.
    #[serde(default)]
    pub synthetic: bool,
}

impl SimTruth {
    pub fn validate(&self) -> Result<()> {
        let g = self.grid.len();
        if g < 2 || self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(FdaError::Input("truth grid must hold at least 2 increasing points".into()));
        }
        let curves = std::iter::once(&self.intercept)
            .chain(self.varying.iter().map(|c| &c.values))
            .chain(&self.eigenfunctions);
        for c in curves {
            if c.len() != g || c.iter().any(|v| !v.is_finite()) {
                return Err(FdaError::Input(format!("truth curves must be finite with {g} grid values")));
            }
        }
        if self.eigenvalues.len() != self.eigenfunctions.len() || self.eigenvalues.iter().any(|&l| !(l >= 0.0)) {
            return Err(FdaError::Input("one non-negative eigenvalue per eigenfunction required".into()));
        }
        if !(self.noise_variance >= 0.0) || self.invariant.iter().any(|b| !b.value.is_finite()) {
            return Err(FdaError::Input("noise variance must be non-negative and coefficients finite".into()));
        }
        let w = linalg::trapezoid_weights(&self.grid);
        for (a, fa) in self.eigenfunctions.iter().enumerate() {
            for (b, fb) in self.eigenfunctions.iter().enumerate().skip(a) {
                let ip: f64 = (0..g).map(|j| w[j] * fa[j] * fb[j]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                if (ip - target).abs() > 1e-6 {
                    return Err(FdaError::Input(format!(
                        "eigenfunctions {a} and {b} have inner product {ip} on the grid"
                    )));
                }
            }
        }
        if self.covariate_pool.is_empty() {
            return Err(FdaError::Input("covariate pool is empty".into()));
        }
        for (r, row) in self.covariate_pool.iter().enumerate() {
            if let Some(&j) = row.missing.iter().find(|&&j| j >= g) {
                return Err(FdaError::Input(format!("pool row {r}: missing index {j} beyond the grid")));
            }
            for name in self.varying.iter().map(|c| &c.name).chain(self.invariant.iter().map(|b| &b.name)) {
                if !row.covariates.contains_key(name) {
                    return Err(FdaError::Input(format!("pool row {r} lacks covariate '{name}'")));
                }
            }
        }
        Ok(())
    }

    pub fn varying_names(&self) -> Vec<String> {
        self.varying.iter().map(|c| c.name.clone()).collect()
    }

    pub fn invariant_names(&self) -> Vec<String> {
        self.invariant.iter().map(|c| c.name.clone()).collect()
    }

    /// Intercept and varying curves by name.
    pub fn coefficient(&self, name: &str) -> Result<&[f64]> {
        if name == INTERCEPT {
            return Ok(&self.intercept);
        }
        self.varying
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
            .ok_or_else(|| FdaError::Lookup {
                kind: "coefficient",
                name: name.to_string(),
            })
    }

    /// Fixed-effect mean of a pool row on the grid.
    pub fn linear_predictor(&self, row: &PoolRow) -> Vec<f64> {
        let shift: f64 = self.invariant.iter().map(|b| b.value * row.covariates[&b.name]).sum();
        (0..self.grid.len())
            .map(|j| {
                self.intercept[j] + shift + self.varying.iter().map(|c| row.covariates[&c.name] * c.values[j]).sum::<f64>()
            })
            .collect()
    }

    pub fn read_json(path: &std::path::Path) -> Result<SimTruth> {
        let t: SimTruth = serde_json::from_reader(std::io::BufReader::new(crate::data_io::open_file(path)?))?;
        t.validate()?;
        Ok(t)
    }
}

/// Gram-Schmidt under trapezoid weights.
pub fn orthonormalize(curves: &[Vec<f64>], grid: &[f64]) -> Vec<Vec<f64>> {
    let w = linalg::trapezoid_weights(grid);
    let ip = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(&w).map(|((x, y), w)| x * y * w).sum() };
    let mut out: Vec<Vec<f64>> = Vec::new();
    for c in curves {
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &out {
                let p = ip(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = ip(&v, &v).sqrt();
        out.push(v.iter().map(|x| x / n).collect());
    }
    out
}

/// Synthetic pool: uniform arms, log-normal baseline steps, uniform start
/// day, and missingness with rising intermittent rates and a rising dropout
/// hazard.
///
/// Covariates: `arm_<level>` indicators, `baseline` (centered log baseline
/// steps) and `start_day` (centered, in units of 100 days). Strata are
/// baseline tertiles.
pub fn synthetic_pool(size: usize, grid_len: usize, seed: u64) -> Vec<PoolRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: LogNormal<f64> = LogNormal::new(8.5, 0.4).expect("valid log-normal");
    let mut rows: Vec<PoolRow> = (0..size)
        .map(|_| {
            let arm = SYNTHETIC_ARMS[rng.random_range(0..SYNTHETIC_ARMS.len())];
            let baseline = steps.sample(&mut rng).ln() - 8.5;
            let start = rng.random_range(1..=120) as f64;
            let mut missing = Vec::new();
            let mut dropped = false;
            for j in 0..grid_len {
                let s = j as f64 / (grid_len.max(2) - 1) as f64;
                dropped = dropped || rng.random::<f64>() < 0.004 + 0.016 * s;
                if dropped || rng.random::<f64>() < 0.05 + 0.30 * s {
                    missing.push(j);
                }
            }
            let mut cov: BTreeMap<String, f64> = SYNTHETIC_ARMS[1..]
                .iter()
                .map(|a| (format!("arm_{a}"), f64::from(u8::from(*a == arm))))
                .collect();
            cov.insert("baseline".into(), baseline);
            cov.insert("start_day".into(), (start - 60.5) / 100.0);
            PoolRow {
                arm: arm.to_string(),
                stratum: None,
                covariates: cov,
                missing,
            }
        })
        .collect();
    let mut b: Vec<f64> = rows.iter().map(|r| r.covariates["baseline"]).collect();
    b.sort_by(f64::total_cmp);
    let (t1, t2) = (linalg::quantile_type7(&b, 1.0 / 3.0), linalg::quantile_type7(&b, 2.0 / 3.0));
    for r in &mut rows {
        let v = r.covariates["baseline"];
        r.stratum = Some(if v <= t1 { "low" } else if v <= t2 { "mid" } else { "high" }.to_string());
    }
    rows
}

fn weekly_grid() -> Vec<f64> {
    (1..=24).map(f64::from).collect()
}

fn shared_truth(grid: Vec<f64>, intercept: Vec<f64>, varying: Vec<NamedCurve>) -> SimTruth {
    let g = grid.len();
    let ones = vec![1.0; g];
    let lin: Vec<f64> = grid.clone();
    let eigenfunctions = orthonormalize(&[ones, lin], &grid);
    SimTruth {
        intercept,
        varying,
        invariant: vec![
            NamedValue {
                name: "baseline".into(),
                value: 0.8,
            },
            NamedValue {
                name: "start_day".into(),
                value: -0.1,
            },
        ],
        eigenfunctions,
        eigenvalues: vec![4.0, 1.0],
        noise_variance: 0.05,
        covariate_pool: synthetic_pool(POOL_SIZE, g, POOL_SEED),
        grid,
        synthetic: true,
    }
}

/// Invented truth on weeks 1 to 24: intercept falling from 7.9 to 7.6 on
/// the log scale with a mid-period plateau, arm effects within `[0, 0.25]`
/// that fade at different rates (two of them nearly vanish mid-period and
/// rebound late), constant and linear subject deviations.
pub fn default_truth() -> SimTruth {
    let grid = weekly_grid();
    let s: Vec<f64> = grid.iter().map(|t| (t - 1.0) / 23.0).collect();
    let pi = std::f64::consts::PI;
    let bump = |x: f64, c: f64, w: f64| (-((x - c) / w).powi(2)).exp();
    let curve = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { s.iter().map(|&x| f(x)).collect() };
    let varying = vec![
        NamedCurve {
            name: "arm_individual".into(),
            values: curve(&|x| 0.22 * (-5.0 * x).exp() + 0.13 * bump(x, 0.8, 0.2)),
        },
        NamedCurve {
            name: "arm_collaboration".into(),
            values: curve(&|x| 0.24 * (-3.0 * x).exp() + 0.12 * bump(x, 0.8, 0.2)),
        },
        NamedCurve {
            name: "arm_competition".into(),
            values: curve(&|x| 0.18 + 0.05 * (pi * x).cos()),
        },
    ];
    shared_truth(grid, curve(&|x| 7.9 - 0.3 * x - 0.045 * (2.0 * pi * x).sin()), varying)
}

/// Like [`default_truth`] but with oscillating arm effects far from the
/// span of the constant and linear eigenfunctions.
pub fn curvature_truth() -> SimTruth {
    let grid = weekly_grid();
    let s: Vec<f64> = grid.iter().map(|t| (t - 1.0) / 23.0).collect();
    let pi = std::f64::consts::PI;
    let curve = |f: &dyn Fn(f64) -> f64| -> Vec<f64> { s.iter().map(|&x| f(x)).collect() };
    let varying = vec![
        NamedCurve {
            name: "arm_individual".into(),
            values: curve(&|x| 0.25 * (2.0 * pi * x).cos()),
        },
        NamedCurve {
            name: "arm_collaboration".into(),
            values: curve(&|x| 0.25 * (3.0 * pi * x).sin()),
        },
        NamedCurve {
            name: "arm_competition".into(),
            values: curve(&|x| 0.25 * (4.0 * pi * x).cos()),
        },
    ];
    shared_truth(grid, curve(&|x| 7.75 + 0.15 * (2.0 * pi * x).cos()), varying)
}

/// Generated curves with the latent draws behind them.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub samples: Vec<FunctionalSample>,
    /// `N × K` subject scores `ζ_ik`.
    pub scores: DMatrix<f64>,
    /// Complete curves before missingness, `N × G`.
    pub complete: DMatrix<f64>,
    pub covariate_donors: Vec<usize>,
    pub missingness_donors: Vec<usize>,
}

pub fn generate_dataset(truth: &SimTruth, n: usize, seed: u64) -> Result<Vec<FunctionalSample>> {
    Ok(generate_with_latent(truth, n, seed)?.samples)
}

pub fn generate_with_latent(truth: &SimTruth, n: usize, seed: u64) -> Result<GeneratedData> {
    if n == 0 {
        return Err(FdaError::InvalidArgument("N must be positive".into()));
    }
    truth.validate()?;
    let g = truth.grid.len();
    let k = truth.eigenvalues.len();
    let pool = &truth.covariate_pool;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let noise_sd = truth.noise_variance.sqrt();
    let mut scores = DMatrix::zeros(n, k);
    let mut complete = DMatrix::zeros(n, g);
    let mut samples = Vec::with_capacity(n);
    let mut cov_donors = Vec::with_capacity(n);
    let mut miss_donors = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.random_range(0..pool.len());
        let row = &pool[c];
        let mut w = truth.linear_predictor(row);
        for kk in 0..k {
            let z = truth.eigenvalues[kk].sqrt() * std.sample(&mut rng);
            scores[(i, kk)] = z;
            w.iter_mut().zip(&truth.eigenfunctions[kk]).for_each(|(v, p)| *v += z * p);
        }
        for v in w.iter_mut() {
            *v += noise_sd * std.sample(&mut rng);
        }
        let d = rng.random_range(0..pool.len());
        let missing = &pool[d].missing;
        let keep: Vec<usize> = (0..g).filter(|j| !missing.contains(j)).collect();
        for j in 0..g {
            complete[(i, j)] = w[j];
        }
        let mut s = FunctionalSample::new(
            format!("sim{i:05}"),
            keep.iter().map(|&j| truth.grid[j]).collect(),
            keep.iter().map(|&j| w[j]).collect(),
        )?
        .with_arm(row.arm.clone());
        s.covariates = row.covariates.clone();
        s.stratum = row.stratum.clone();
        samples.push(s);
        cov_donors.push(c);
        miss_donors.push(d);
    }
    Ok(GeneratedData {
        samples,
        scores,
        complete,
        covariate_donors: cov_donors,
        missingness_donors: miss_donors,
    })
}

/// Trapezoid `∫ (a − b)²` over `grid`.
pub fn ise(estimate: &[f64], truth: &[f64], grid: &[f64]) -> Result<f64> {
    if estimate.len() != grid.len() || truth.len() != grid.len() {
        return Err(FdaError::InvalidArgument(format!(
            "lengths differ: estimate {}, truth {}, grid {}",
            estimate.len(),
            truth.len(),
            grid.len()
        )));
    }
    let d: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(linalg::trapezoid(grid, &d))
}

pub const METHOD_FOSR: &str = "fosr";
pub const METHOD_TWO_STEP: &str = "two_step";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub num_basis: usize,
    pub min_obs: usize,
    /// Shared by the FoSR subject effect and the two-step scores.
    pub fpca: FpcaConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sizes: vec![100, 250],
            replicates: 200,
            seed: 0,
            num_basis: DEFAULT_NUM_BASIS_INTERVENTION,
            min_obs: fosr::DEFAULT_MIN_OBS,
            fpca: FpcaConfig {
                num_components: Some(2),
                ..FpcaConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub n: usize,
    pub replicate: usize,
    pub coefficient: String,
    pub ise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IseSummary {
    pub method: String,
    pub n: usize,
    pub coefficient: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub method: String,
    pub n: usize,
    pub coefficient: String,
    pub mean: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub grid: Vec<f64>,
    pub rows: Vec<BenchmarkRow>,
    pub summaries: Vec<IseSummary>,
    pub mean_curves: Vec<MeanCurve>,
    pub config: BenchmarkConfig,
}

/// Estimated curves from both methods on one dataset, in
/// `[intercept, varying...]` order.
#[derive(Debug, Clone)]
pub struct MethodCurves {
    pub fosr: Vec<Vec<f64>>,
    pub two_step: Vec<Vec<f64>>,
}

/// Fits FoSR and the two-step model to one dataset.
pub fn fit_both(truth: &SimTruth, samples: &[FunctionalSample], config: &BenchmarkConfig) -> Result<MethodCurves> {
    let grid = &truth.grid;
    let observed: Vec<FunctionalSample> = samples.iter().filter(|s| !s.is_empty()).cloned().collect();
    let names: Vec<String> = std::iter::once(INTERCEPT.to_string()).chain(truth.varying_names()).collect();
    let basis = BasisSystem::cubic(grid[0], grid[grid.len() - 1], config.num_basis)?;
    let mut spec = FosrSpec::new(basis);
    spec.varying_covariates = truth.varying_names();
    spec.invariant_covariates = truth.invariant_names();
    spec.min_obs = config.min_obs;
    let (fit, _) = fosr::fit_fosr_with_fpca(&observed, &spec, &config.fpca)?;
    let fosr_curves = names
        .iter()
        .map(|n| fosr::predict_coefficient(&fit, n, grid))
        .collect::<Result<_>>()?;
    let covs: Vec<String> = truth.varying_names().into_iter().chain(truth.invariant_names()).collect();
    let (ts, _) = twostep::fit_two_step(&observed, &covs, &config.fpca, grid)?;
    let ts_curves = names
        .iter()
        .map(|n| ts.coefficient(n).map(|v| v.to_vec()))
        .collect::<Result<_>>()?;
    Ok(MethodCurves {
        fosr: fosr_curves,
        two_step: ts_curves,
    })
}

fn dataset_seed(master: u64, n: usize, replicate: usize) -> u64 {
    replicate_seed(replicate_seed(master, n as u64, 0), replicate as u64, 0)
}

/// Every `(N, replicate)` dataset is fitted by both methods; rows come back
/// in `(N, replicate, method, coefficient)` order.
pub fn run_benchmark(truth: &SimTruth, config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    if config.replicates == 0 {
        return Err(FdaError::InvalidArgument("at least one replicate required".into()));
    }
    if config.sizes.is_empty() || config.sizes.contains(&0) {
        return Err(FdaError::InvalidArgument("sample sizes must be positive".into()));
    }
    truth.validate()?;
    let grid = &truth.grid;
    let names: Vec<String> = std::iter::once(INTERCEPT.to_string()).chain(truth.varying_names()).collect();
    let truths: Vec<&[f64]> = names.iter().map(|n| truth.coefficient(n)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = config
        .sizes
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    let fitted: Vec<MethodCurves> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let data = generate_dataset(truth, n, dataset_seed(config.seed, n, r))?;
            fit_both(truth, &data, config).map_err(|e| with_context(e, n, r))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (&(n, r), curves) in jobs.iter().zip(&fitted) {
        for (method, set) in [(METHOD_FOSR, &curves.fosr), (METHOD_TWO_STEP, &curves.two_step)] {
            for (m, name) in names.iter().enumerate() {
                rows.push(BenchmarkRow {
                    method: method.to_string(),
                    n,
                    replicate: r,
                    coefficient: name.clone(),
                    ise: ise(&set[m], truths[m], grid)?,
                });
            }
        }
    }
    let mut summaries = Vec::new();
    let mut mean_curves = Vec::new();
    for &n in &config.sizes {
        for method in [METHOD_FOSR, METHOD_TWO_STEP] {
            for (m, name) in names.iter().enumerate() {
                let mut v: Vec<f64> = rows
                    .iter()
                    .filter(|x| x.n == n && x.method == method && &x.coefficient == name)
                    .map(|x| x.ise)
                    .collect();
                v.sort_by(f64::total_cmp);
                summaries.push(IseSummary {
                    method: method.to_string(),
                    n,
                    coefficient: name.clone(),
                    median: linalg::quantile_type7(&v, 0.5),
                    q1: linalg::quantile_type7(&v, 0.25),
                    q3: linalg::quantile_type7(&v, 0.75),
                    count: v.len(),
                });
                let curves: Vec<&Vec<f64>> = jobs
                    .iter()
                    .zip(&fitted)
                    .filter(|((nn, _), _)| *nn == n)
                    .map(|(_, c)| if method == METHOD_FOSR { &c.fosr[m] } else { &c.two_step[m] })
                    .collect();
                let mean = (0..grid.len())
                    .map(|j| curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64)
                    .collect();
                mean_curves.push(MeanCurve {
                    method: method.to_string(),
                    n,
                    coefficient: name.clone(),
                    mean,
                    truth: truths[m].to_vec(),
                });
            }
        }
    }
    Ok(BenchmarkResult {
        grid: grid.clone(),
        rows,
        summaries,
        mean_curves,
        config: config.clone(),
    })
}

fn with_context(e: FdaError, n: usize, r: usize) -> FdaError {
    let ctx = |m: String| format!("N={n}, replicate {r}: {m}");
    match e {
        FdaError::Numerical(m) => FdaError::Numerical(ctx(m)),
        FdaError::Inference(m) => FdaError::Inference(ctx(m)),
        FdaError::Input(m) => FdaError::Input(ctx(m)),
        FdaError::Precondition(m) => FdaError::Precondition(ctx(m)),
        other if other.is_numerical() => FdaError::Numerical(ctx(other.to_string())),
        other => FdaError::Input(ctx(other.to_string())),
    }
}

impl BenchmarkResult {
    pub fn summary(&self, method: &str, n: usize, coefficient: &str) -> Result<&IseSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.n == n && s.coefficient == coefficient)
            .ok_or_else(|| FdaError::Lookup {
                kind: "benchmark summary",
                name: format!("{method}/{n}/{coefficient}"),
            })
    }

    pub fn mean_curve(&self, method: &str, n: usize, coefficient: &str) -> Result<&MeanCurve> {
        self.mean_curves
            .iter()
            .find(|s| s.method == method && s.n == n && s.coefficient == coefficient)
            .ok_or_else(|| FdaError::Lookup {
                kind: "mean curve",
                name: format!("{method}/{n}/{coefficient}"),
            })
    }

    /// `method,n,replicate,coefficient,ise`.
    pub fn write_rows_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `method,n,coefficient,t,mean_estimate,truth`.
    pub fn write_mean_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "n", "coefficient", "t", "mean_estimate", "truth"])?;
        for c in &self.mean_curves {
            for (j, t) in self.grid.iter().enumerate() {
                w.write_record([
                    c.method.clone(),
                    c.n.to_string(),
                    c.coefficient.clone(),
                    format!("{t}"),
                    format!("{}", c.mean[j]),
                    format!("{}", c.truth[j]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "summaries": self.summaries,
            "config": self.config,
        })
    }
}

/// Reads the `method,n,replicate,coefficient,ise` table.
pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchmarkRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(FdaError::from)).collect()
}

/// `subject_id,week,value` for generated samples.
pub fn write_samples_csv<W: Write>(samples: &[FunctionalSample], out: W) -> Result<()> {
    crate::data_io::write_long_csv(samples, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_truth(noise: f64, eig: [f64; 2]) -> SimTruth {
        let mut t = default_truth();
        t.noise_variance = noise;
        t.eigenvalues = eig.to_vec();
        t
    }

    #[test]
    fn shipped_truths_are_valid() {
        for t in [default_truth(), curvature_truth()] {
            t.validate().unwrap();
            assert!(t.synthetic);
            assert!((t.intercept[0] - 7.9).abs() < 1e-12);
            for c in &t.varying {
                assert!(c.values.iter().all(|v| v.abs() <= 0.25 + 1e-12));
            }
        }
        let d = default_truth();
        assert!((d.intercept[23] - 7.6).abs() < 1e-12);
        assert!(d.intercept.windows(2).all(|w| w[1] <= w[0]));
        assert!(d.varying.iter().all(|c| c.values.iter().all(|&v| v >= 0.0)));
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<SimTruth>(&json).unwrap(), d);
    }

    #[test]
    fn noiseless_limit_is_the_linear_predictor() {
        let mut t = small_truth(0.0, [0.0, 0.0]);
        for r in &mut t.covariate_pool {
            r.missing.clear();
        }
        let d = generate_with_latent(&t, 30, 5).unwrap();
        for (i, s) in d.samples.iter().enumerate() {
            let lp = t.linear_predictor(&t.covariate_pool[d.covariate_donors[i]]);
            assert_eq!(s.values, lp);
        }
    }

    #[test]
    fn donor_pattern_is_copied() {
        let mut t = default_truth();
        t.covariate_pool.truncate(1);
        t.covariate_pool[0].missing = vec![2, 6];
        let s = generate_dataset(&t, 4, 1).unwrap();
        for x in s {
            let weeks: Vec<f64> = (1..=24).filter(|w| *w != 3 && *w != 7).map(f64::from).collect();
            assert_eq!(x.times, weeks);
        }
    }

    #[test]
    fn donors_are_drawn_independently() {
        let t = default_truth();
        let d = generate_with_latent(&t, 2000, 8).unwrap();
        let same = d
            .covariate_donors
            .iter()
            .zip(&d.missingness_donors)
            .filter(|(a, b)| a == b)
            .count();
        assert!(same < 20, "{same}");
    }

    #[test]
    fn moments_match_the_truth() {
        let mut t = default_truth();
        for r in &mut t.covariate_pool {
            r.missing.clear();
        }
        let d = generate_with_latent(&t, 2000, 42).unwrap();
        for k in 0..2 {
            let col: Vec<f64> = d.scores.column(k).iter().copied().collect();
            let v = linalg::sample_sd(&col).powi(2);
            assert!((v / t.eigenvalues[k] - 1.0).abs() < 0.05, "score {k}: {v}");
        }
        // residual after removing mean and the exact latent part
        let mut res = Vec::new();
        for (i, s) in d.samples.iter().enumerate() {
            let lp = t.linear_predictor(&t.covariate_pool[d.covariate_donors[i]]);
            for j in 0..t.grid.len() {
                let latent: f64 = (0..2).map(|k| d.scores[(i, k)] * t.eigenfunctions[k][j]).sum();
                res.push(s.values[j] - lp[j] - latent);
            }
        }
        let v = res.iter().map(|x| x * x).sum::<f64>() / res.len() as f64;
        assert!((v / t.noise_variance - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn seed_determinism_and_errors() {
        let t = default_truth();
        assert_eq!(generate_dataset(&t, 50, 3).unwrap(), generate_dataset(&t, 50, 3).unwrap());
        assert_ne!(generate_dataset(&t, 50, 3).unwrap(), generate_dataset(&t, 50, 4).unwrap());
        assert!(matches!(generate_dataset(&t, 0, 3), Err(FdaError::InvalidArgument(_))));
        let mut empty = t.clone();
        empty.covariate_pool.clear();
        assert!(matches!(generate_dataset(&empty, 5, 3), Err(FdaError::Input(_))));
    }

    #[test]
    fn missing_count_distribution_matches_pool() {
        // chi-square goodness of fit of per-subject missing counts, bins pooled to expected >= 5
        let t = default_truth();
        let n = 20_000;
        let s = generate_dataset(&t, n, 17).unwrap();
        let g = t.grid.len();
        let mut pool_freq = vec![0.0; g + 1];
        for r in &t.covariate_pool {
            pool_freq[r.missing.len()] += 1.0 / t.covariate_pool.len() as f64;
        }
        let mut obs = vec![0.0; g + 1];
        for x in &s {
            obs[g - x.len()] += 1.0;
        }
        let (mut chi, mut df, mut eb, mut ob) = (0.0, 0usize, 0.0, 0.0);
        for c in 0..=g {
            eb += pool_freq[c] * n as f64;
            ob += obs[c];
            if eb >= 5.0 {
                chi += (ob - eb) * (ob - eb) / eb;
                df += 1;
                eb = 0.0;
                ob = 0.0;
            }
        }
        if eb > 0.0 {
            chi += (ob - eb) * (ob - eb) / eb.max(1e-12);
        }
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let crit = ChiSquared::new((df - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(chi < crit, "chi {chi} crit {crit}");
    }

    #[test]
    fn ise_examples() {
        let grid = linalg::linspace(0.0, 1.0, 1001);
        let zero = vec![0.0; 1001];
        assert!((ise(&vec![1.0; 1001], &zero, &grid).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ise(&grid, &grid, &grid).unwrap(), 0.0);
        assert!((ise(&grid, &zero, &grid).unwrap() - 1.0 / 3.0).abs() < 1e-5);
        assert!(matches!(ise(&grid[..3], &zero, &grid), Err(FdaError::InvalidArgument(_))));
    }

    proptest::proptest! {
        #[test]
        fn ise_is_symmetric_seminorm(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let grid = [0.0, 0.5, 1.0, 2.0, 2.5, 4.0];
            let ab = ise(&a, &b, &grid).unwrap();
            proptest::prop_assert!(ab >= 0.0);
            proptest::prop_assert!((ab - ise(&b, &a, &grid).unwrap()).abs() < 1e-12);
            proptest::prop_assert_eq!(ab == 0.0, a == b);
        }
    }

    #[test]
    fn tiny_benchmark_is_deterministic() {
        let t = default_truth();
        let cfg = BenchmarkConfig {
            sizes: vec![60],
            replicates: 1,
            seed: 2,
            ..BenchmarkConfig::default()
        };
        let a = run_benchmark(&t, &cfg).unwrap();
        let b = run_benchmark(&t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2 * 4);
        let mut buf = Vec::new();
        a.write_rows_csv(&mut buf).unwrap();
        assert_eq!(read_rows_csv(buf.as_slice()).unwrap(), a.rows);
        assert!(a.summary(METHOD_FOSR, 60, INTERCEPT).unwrap().median >= 0.0);
    }
}
