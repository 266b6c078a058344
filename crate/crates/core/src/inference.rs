//! Subject-level bootstrap: standard errors, Wald and CMA joint bands,
//! pointwise and global p-values, contrasts, and the cohort/stratum variant.

use std::collections::BTreeMap;
use std::io::Write;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{FdaError, Result};
use crate::fofr::{self, FofrSpec};
use crate::fosr::{self, FosrSpec};
use crate::fpca::FpcaConfig;
use crate::linalg;
use crate::sample::FunctionalSample;

/// Default replicate count.
pub const DEFAULT_REPLICATES: usize = 300;

/// Largest share of replicates allowed to need a re-draw.
pub const MAX_FAILURE_RATE: f64 = 0.1;

/// Relative SE below which a grid point is treated as degenerate.
pub const DEGENERATE_SE: f64 = 1e-12;

/// Evaluation points of a band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandGrid {
    Line(Vec<f64>),
    /// Row-major over `(t, u)`: point `i * |u| + j` is `(t_i, u_j)`.
    Surface { t: Vec<f64>, u: Vec<f64> },
}

impl BandGrid {
    pub fn len(&self) -> usize {
        match self {
            BandGrid::Line(t) => t.len(),
            BandGrid::Surface { t, u } => t.len() * u.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, i: usize) -> (f64, Option<f64>) {
        match self {
            BandGrid::Line(t) => (t[i], None),
            BandGrid::Surface { t, u } => (t[i / u.len()], Some(u[i % u.len()])),
        }
    }
}

/// Band statistics from a replicate matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub wald_lo: Vec<f64>,
    pub wald_hi: Vec<f64>,
    pub cma_quantile: f64,
    pub cma_lo: Vec<f64>,
    pub cma_hi: Vec<f64>,
    pub pointwise_p: Vec<f64>,
    pub global_p: f64,
    /// Max standardized deviation per replicate.
    pub max_statistics: Vec<f64>,
    /// Points excluded from the max statistic for near-zero SE.
    pub degenerate_points: Vec<usize>,
    pub replicates: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub term: String,
    pub grid: BandGrid,
    #[serde(flatten)]
    pub stats: BandStats,
    #[serde(skip)]
    pub replicate_curves: DMatrix<f64>,
}

/// Correlation- and multiplicity-adjusted band from `B × G` replicate curves.
///
/// `d_b = max_t |β̂ᵇ(t) − mean_b β̂ᵇ(t)| / SE(t)` over non-degenerate points,
/// `q` its type-7 `(1 − α)` quantile, band `estimate ± q SE`.
pub fn cma_band(replicates: &DMatrix<f64>, estimate: &[f64], alpha: f64) -> Result<BandStats> {
    let b = replicates.nrows();
    let g = replicates.ncols();
    if b < 2 {
        return Err(FdaError::InvalidArgument(format!("at least 2 replicates required, got {b}")));
    }
    if estimate.len() != g {
        return Err(FdaError::InvalidArgument(format!(
            "{} estimates for {g} grid points",
            estimate.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FdaError::InvalidArgument(format!("alpha {alpha} not in (0, 1)")));
    }
    let mean: Vec<f64> = (0..g).map(|j| replicates.column(j).mean()).collect();
    let se: Vec<f64> = (0..g)
        .map(|j| {
            let ss: f64 = replicates.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum();
            (ss / (b - 1) as f64).sqrt()
        })
        .collect();
    let scale = estimate
        .iter()
        .chain(replicates.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let degenerate: Vec<usize> = (0..g).filter(|&j| !(se[j] >= DEGENERATE_SE * scale)).collect();
    if degenerate.len() == g {
        return Err(FdaError::DegenerateSe { term: String::new() });
    }
    if !degenerate.is_empty() {
        info!("{} of {g} grid points have degenerate bootstrap SE", degenerate.len());
    }
    let is_deg: Vec<bool> = (0..g).map(|j| degenerate.binary_search(&j).is_ok()).collect();
    let d: Vec<f64> = (0..b)
        .map(|r| {
            (0..g)
                .filter(|&j| !is_deg[j])
                .map(|j| (replicates[(r, j)] - mean[j]).abs() / se[j])
                .fold(0.0, f64::max)
        })
        .collect();
    let mut sorted = d.clone();
    sorted.sort_by(f64::total_cmp);
    let q = linalg::quantile_type7(&sorted, 1.0 - alpha);
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0);
    let floor = 1.0 / b as f64;
    let pointwise_p: Vec<f64> = (0..g)
        .map(|j| {
            if is_deg[j] {
                if estimate[j] == 0.0 {
                    1.0
                } else {
                    floor
                }
            } else {
                level_p_value(&sorted, estimate[j].abs() / se[j]).max(floor)
            }
        })
        .collect();
    let global_p = pointwise_p.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BandStats {
        wald_lo: (0..g).map(|j| estimate[j] - z * se[j]).collect(),
        wald_hi: (0..g).map(|j| estimate[j] + z * se[j]).collect(),
        cma_lo: (0..g).map(|j| estimate[j] - q * se[j]).collect(),
        cma_hi: (0..g).map(|j| estimate[j] + q * se[j]).collect(),
        estimate: estimate.to_vec(),
        se,
        cma_quantile: q,
        pointwise_p,
        global_p,
        max_statistics: d,
        degenerate_points: degenerate,
        replicates: b,
        alpha,
    })
}

/// Smallest α whose band `±Q(1−α)·SE` excludes zero, for standardized
/// estimate `z`: one minus the first level at which the type-7 quantile
/// function of `sorted` reaches `z`.
fn level_p_value(sorted: &[f64], z: f64) -> f64 {
    let n = sorted.len();
    if z <= sorted[0] {
        return 1.0;
    }
    if z > sorted[n - 1] {
        return 0.0;
    }
    // first i with sorted[i+1] >= z; the quantile function is linear on [i, i+1]
    let i = sorted.partition_point(|&v| v < z) - 1;
    let (a, c) = (sorted[i], sorted[i + 1]);
    let frac = if c > a { (z - a) / (c - a) } else { 1.0 };
    let level = (i as f64 + frac) / (n - 1) as f64;
    (1.0 - level).clamp(0.0, 1.0)
}

/// Band of `m1 − m2` from aligned replicates.
pub fn contrast_band(
    replicates_m1: &DMatrix<f64>,
    replicates_m2: &DMatrix<f64>,
    estimate_m1: &[f64],
    estimate_m2: &[f64],
    alpha: f64,
) -> Result<BandStats> {
    if replicates_m1.shape() != replicates_m2.shape() {
        return Err(FdaError::InvalidArgument(format!(
            "replicate shapes differ: {:?} vs {:?}",
            replicates_m1.shape(),
            replicates_m2.shape()
        )));
    }
    if estimate_m1.len() != estimate_m2.len() {
        return Err(FdaError::InvalidArgument("estimate lengths differ".into()));
    }
    let diff = replicates_m1 - replicates_m2;
    let est: Vec<f64> = estimate_m1.iter().zip(estimate_m2).map(|(a, b)| a - b).collect();
    cma_band(&diff, &est, alpha)
}

/// Subject resampling scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Resampling {
    #[default]
    Plain,
    /// Whole cohorts in cohort-randomized arms; stratum-matched groups elsewhere.
    /// `group_size` defaults to the rounded mean cohort size.
    Stratified { group_size: Option<usize> },
}

/// Stable 64-bit seed for replicate `b`, attempt `attempt`.
pub fn replicate_seed(master: u64, b: u64, attempt: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b.wrapping_add(1)))
        .wrapping_add(0xD1B5_4A32_D192_ED03u64.wrapping_mul(attempt));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn relabel(mut s: FunctionalSample, k: usize) -> FunctionalSample {
    s.subject_id = format!("{}#{k}", s.subject_id);
    s
}

/// `n` draws with replacement; copies get unique ids.
pub fn plain_resample(samples: &[FunctionalSample], rng: &mut impl Rng) -> Vec<FunctionalSample> {
    (0..samples.len())
        .map(|k| relabel(samples[rng.random_range(0..samples.len())].clone(), k))
        .collect()
}

/// Cohort-level resampling in arms with cohort labels; elsewhere one
/// subject plus `group_size − 1` draws from the same stratum and arm, until
/// every arm has its original count.
pub fn stratified_resample(
    samples: &[FunctionalSample],
    group_size: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<FunctionalSample>> {
    let mut arms: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        arms.entry(s.arm.as_str()).or_default().push(i);
    }
    let cohort_sizes: Vec<usize> = {
        let mut c: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for s in samples {
            if let Some(co) = &s.cohort {
                *c.entry((s.arm.as_str(), co.as_str())).or_default() += 1;
            }
        }
        c.into_values().collect()
    };
    let group = group_size.unwrap_or_else(|| {
        if cohort_sizes.is_empty() {
            1
        } else {
            (cohort_sizes.iter().sum::<usize>() as f64 / cohort_sizes.len() as f64).round() as usize
        }
    });
    let group = group.max(1);
    let mut out = Vec::with_capacity(samples.len());
    for (arm, idx) in &arms {
        let n_arm = idx.len();
        let cohort_arm = idx.iter().any(|&i| samples[i].cohort.is_some());
        let mut picked: Vec<usize> = Vec::with_capacity(n_arm + group);
        if cohort_arm {
            let mut cohorts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in idx {
                let c = samples[i].cohort.as_deref().ok_or_else(|| {
                    FdaError::Input(format!(
                        "subject '{}' in cohort arm '{arm}' has no cohort label",
                        samples[i].subject_id
                    ))
                })?;
                cohorts.entry(c).or_default().push(i);
            }
            let list: Vec<&Vec<usize>> = cohorts.values().collect();
            while picked.len() < n_arm {
                picked.extend(list[rng.random_range(0..list.len())]);
            }
        } else {
            let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in idx {
                let st = samples[i].stratum.as_deref().ok_or_else(|| {
                    FdaError::Input(format!(
                        "subject '{}' in arm '{arm}' has neither cohort nor stratum label",
                        samples[i].subject_id
                    ))
                })?;
                strata.entry(st).or_default().push(i);
            }
            while picked.len() < n_arm {
                let first = idx[rng.random_range(0..n_arm)];
                picked.push(first);
                let pool = &strata[samples[first].stratum.as_deref().expect("checked")];
                for _ in 1..group {
                    picked.push(pool[rng.random_range(0..pool.len())]);
                }
            }
        }
        picked.truncate(n_arm);
        out.extend(picked.into_iter().map(|i| samples[i].clone()));
    }
    Ok(out.into_iter().enumerate().map(|(k, s)| relabel(s, k)).collect())
}

pub fn resample(samples: &[FunctionalSample], scheme: &Resampling, rng: &mut impl Rng) -> Result<Vec<FunctionalSample>> {
    match scheme {
        Resampling::Plain => Ok(plain_resample(samples, rng)),
        Resampling::Stratified { group_size } => stratified_resample(samples, *group_size, rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub resampling: Resampling,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            alpha: 0.05,
            resampling: Resampling::Plain,
        }
    }
}

/// Runs `f` for replicates `0..b`, re-drawing failed ones with fresh seeds.
/// Output order is the replicate index, whatever the thread count.
pub fn run_replicates<T, F>(b: usize, seed: u64, f: F) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    if b < 2 {
        return Err(FdaError::InvalidArgument(format!("at least 2 replicates required, got {b}")));
    }
    let max_fail = (MAX_FAILURE_RATE * b as f64).floor() as usize;
    let results: Vec<(Option<T>, usize, Option<String>)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut last = None;
            for attempt in 0..=max_fail {
                let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(seed, r as u64, attempt as u64));
                match f(&mut rng) {
                    Ok(v) => return (Some(v), attempt, last),
                    Err(e) => last = Some(e.to_string()),
                }
            }
            (None, max_fail + 1, last)
        })
        .collect();
    let failures: usize = results.iter().map(|r| r.1).sum();
    if failures > max_fail || results.iter().any(|r| r.0.is_none()) {
        let msg = results.iter().find_map(|r| r.2.clone()).unwrap_or_default();
        return Err(FdaError::Inference(format!(
            "{failures} of {b} bootstrap replicates failed to fit (limit {max_fail}); first error: {msg}"
        )));
    }
    if failures > 0 {
        warn!("{failures} bootstrap replicates re-drawn after fit failures");
    }
    Ok((results.into_iter().map(|r| r.0.expect("checked")).collect(), failures))
}

/// Percentile-bootstrap summary of a scalar coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarBootstrap {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
}

pub fn scalar_bootstrap(name: &str, estimate: f64, reps: &[f64], alpha: f64) -> ScalarBootstrap {
    let b = reps.len();
    let mut sorted = reps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let below = reps.iter().filter(|&&v| v <= 0.0).count() as f64 / b as f64;
    let above = reps.iter().filter(|&&v| v >= 0.0).count() as f64 / b as f64;
    ScalarBootstrap {
        name: name.to_string(),
        estimate,
        std_error: linalg::sample_sd(reps),
        ci_lo: linalg::quantile_type7(&sorted, alpha / 2.0),
        ci_hi: linalg::quantile_type7(&sorted, 1.0 - alpha / 2.0),
        p_value: (2.0 * below.min(above)).clamp(1.0 / b as f64, 1.0),
    }
}

/// Bands for every functional term plus scalar summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub bands: Vec<BootstrapBand>,
    pub scalars: Vec<ScalarBootstrap>,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub resampling: Resampling,
}

impl BootstrapResult {
    pub fn band(&self, term: &str) -> Result<&BootstrapBand> {
        self.bands.iter().find(|b| b.term == term).ok_or_else(|| FdaError::Lookup {
            kind: "band",
            name: term.to_string(),
        })
    }

    /// Band of `m1 − m2` from the stored replicates.
    pub fn contrast(&self, m1: &str, m2: &str) -> Result<BootstrapBand> {
        let a = self.band(m1)?;
        let b = self.band(m2)?;
        let stats = contrast_band(
            &a.replicate_curves,
            &b.replicate_curves,
            &a.stats.estimate,
            &b.stats.estimate,
            self.alpha,
        )
        .map_err(|e| name_degenerate(e, &format!("{m1}-{m2}")))?;
        Ok(BootstrapBand {
            term: format!("{m1}-{m2}"),
            grid: a.grid.clone(),
            stats,
            replicate_curves: &a.replicate_curves - &b.replicate_curves,
        })
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let terms: serde_json::Map<String, serde_json::Value> = self
            .bands
            .iter()
            .map(|b| {
                (
                    b.term.clone(),
                    serde_json::json!({
                        "global_p": b.stats.global_p,
                        "cma_quantile": b.stats.cma_quantile,
                        "degenerate_points": b.stats.degenerate_points.len(),
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "terms": terms,
            "scalars": self.scalars,
            "replicates": self.replicates,
            "failed_replicates": self.failed_replicates,
            "seed": self.seed,
            "alpha": self.alpha,
            "resampling": self.resampling,
            "policies": {
                "quantile": "type-7",
                "degenerate_se": format!("points with SE < {DEGENERATE_SE:e} x scale excluded from the max statistic; p = 1 if estimate is 0 else 1/B"),
                "p_value_floor": "1/B",
                "failed_replicates": "re-drawn with a fresh seed",
                "scalar_p_values": "percentile bootstrap",
            },
        })
    }
}

fn name_degenerate(e: FdaError, term: &str) -> FdaError {
    match e {
        FdaError::DegenerateSe { .. } => FdaError::DegenerateSe { term: term.to_string() },
        other => other,
    }
}

/// `term,t[,u],estimate,se,wald_lo,wald_hi,cma_lo,cma_hi,pointwise_p`.
pub fn write_bands_csv<W: Write>(bands: &[BootstrapBand], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let surface = bands.iter().any(|b| matches!(b.grid, BandGrid::Surface { .. }));
    let mut header = vec!["term", "t"];
    if surface {
        header.push("u");
    }
    header.extend(["estimate", "se", "wald_lo", "wald_hi", "cma_lo", "cma_hi", "pointwise_p"]);
    w.write_record(&header)?;
    for b in bands {
        let s = &b.stats;
        for i in 0..b.grid.len() {
            let (t, u) = b.grid.point(i);
            let mut rec = vec![b.term.clone(), format!("{t}")];
            if surface {
                rec.push(u.map(|v| format!("{v}")).unwrap_or_default());
            }
            for v in [s.estimate[i], s.se[i], s.wald_lo[i], s.wald_hi[i], s.cma_lo[i], s.cma_hi[i], s.pointwise_p[i]] {
                rec.push(format!("{v}"));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn assemble_bands(
    names: &[String],
    grid: &BandGrid,
    estimates: &[Vec<f64>],
    reps: &[Vec<Vec<f64>>],
    alpha: f64,
) -> Result<Vec<BootstrapBand>> {
    let b = reps.len();
    names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let g = estimates[m].len();
            let mat = DMatrix::from_fn(b, g, |r, j| reps[r][m][j]);
            let stats = cma_band(&mat, &estimates[m], alpha).map_err(|e| name_degenerate(e, name))?;
            Ok(BootstrapBand {
                term: name.clone(),
                grid: grid.clone(),
                stats,
                replicate_curves: mat,
            })
        })
        .collect()
}

/// Each replicate resamples subjects, re-runs FPCA, refits FoSR and
/// evaluates every functional coefficient on `grid`.
pub fn bootstrap_fosr(
    samples: &[FunctionalSample],
    spec: &FosrSpec,
    fpca_config: &FpcaConfig,
    grid: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let (fit, _) = fosr::fit_fosr_with_fpca(samples, spec, fpca_config)?;
    let names = fit.terms.clone();
    let estimates: Vec<Vec<f64>> = names
        .iter()
        .map(|n| fosr::predict_coefficient(&fit, n, grid))
        .collect::<Result<_>>()?;
    let (reps, failures) = run_replicates(config.replicates, config.seed, |rng| {
        let draw = resample(samples, &config.resampling, rng)?;
        let (f, _) = fosr::fit_fosr_with_fpca(&draw, spec, fpca_config)?;
        let curves: Vec<Vec<f64>> = names
            .iter()
            .map(|n| fosr::predict_coefficient(&f, n, grid))
            .collect::<Result<_>>()?;
        let scal: Vec<f64> = f.scalar_coefficients.iter().map(|c| c.estimate).collect();
        Ok((curves, scal))
    })?;
    let curves: Vec<Vec<Vec<f64>>> = reps.iter().map(|r| r.0.clone()).collect();
    let bands = assemble_bands(&names, &BandGrid::Line(grid.to_vec()), &estimates, &curves, config.alpha)?;
    let scalars = fit
        .scalar_coefficients
        .iter()
        .enumerate()
        .map(|(m, c)| {
            let v: Vec<f64> = reps.iter().map(|r| r.1[m]).collect();
            scalar_bootstrap(&c.name, c.estimate, &v, config.alpha)
        })
        .collect();
    Ok(BootstrapResult {
        bands,
        scalars,
        replicates: config.replicates,
        failed_replicates: failures,
        seed: config.seed,
        alpha: config.alpha,
        resampling: config.resampling.clone(),
    })
}

/// FoFR analogue: the max statistic runs over the `(t, u)` product grid of
/// each arm's surface; the predictor imputation is redone per replicate.
pub fn bootstrap_fofr(
    predictor_samples: &[FunctionalSample],
    response_samples: &[FunctionalSample],
    spec: &FofrSpec,
    fpca_config: &FpcaConfig,
    t: &[f64],
    u: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let surfaces = |fit: &fofr::FofrFit| -> Result<Vec<Vec<f64>>> {
        fit.arms
            .iter()
            .map(|a| {
                let m = fofr::evaluate_surface(fit, a, t, u)?;
                Ok((0..t.len()).flat_map(|i| (0..u.len()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect())
            })
            .collect()
    };
    let fit = fofr::fit_fofr_with_fpca(predictor_samples, response_samples, spec, fpca_config)?;
    let names: Vec<String> = fit.arms.clone();
    let estimates = surfaces(&fit)?;
    // resample response subjects; their predictor curves follow by id
    let pred_by_id: std::collections::HashMap<&str, &FunctionalSample> =
        predictor_samples.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let (reps, failures) = run_replicates(config.replicates, config.seed, |rng| {
        let draw = resample(response_samples, &config.resampling, rng)?;
        let preds: Vec<FunctionalSample> = draw
            .iter()
            .filter_map(|s| {
                let orig = s.subject_id.rsplit_once('#').map_or(s.subject_id.as_str(), |x| x.0);
                pred_by_id.get(orig).map(|p| {
                    let mut p = (*p).clone();
                    p.subject_id = s.subject_id.clone();
                    p
                })
            })
            .collect();
        let f = fofr::fit_fofr_with_fpca(&preds, &draw, spec, fpca_config)?;
        let scal: Vec<f64> = f.scalar_coefficients.iter().map(|c| c.estimate).collect();
        Ok((surfaces(&f)?, scal))
    })?;
    let curves: Vec<Vec<Vec<f64>>> = reps.iter().map(|r| r.0.clone()).collect();
    let grid = BandGrid::Surface {
        t: t.to_vec(),
        u: u.to_vec(),
    };
    let bands = assemble_bands(&names, &grid, &estimates, &curves, config.alpha)?;
    let scalars = fit
        .scalar_coefficients
        .iter()
        .enumerate()
        .map(|(m, c)| {
            let v: Vec<f64> = reps.iter().map(|r| r.1[m]).collect();
            scalar_bootstrap(&c.name, c.estimate, &v, config.alpha)
        })
        .collect();
    Ok(BootstrapResult {
        bands,
        scalars,
        replicates: config.replicates,
        failed_replicates: failures,
        seed: config.seed,
        alpha: config.alpha,
        resampling: config.resampling.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn two_replicate_hand_example() {
        let reps = DMatrix::from_row_slice(2, 2, &[0.9, 1.1, 1.1, 0.9]);
        let s = cma_band(&reps, &[1.0, 1.0], 0.05).unwrap();
        for j in 0..2 {
            assert!((s.se[j] - 0.1414).abs() < 1e-4);
            assert!((s.cma_hi[j] - 1.1).abs() < 1e-12);
            assert!((s.cma_lo[j] - 0.9).abs() < 1e-12);
        }
        assert!((s.max_statistics[0] - 0.7071).abs() < 1e-4);
        assert!((s.max_statistics[1] - 0.7071).abs() < 1e-4);
        assert!((s.cma_quantile - 0.7071).abs() < 1e-4);
        assert_eq!(s.global_p, s.pointwise_p.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn single_point_is_empirical_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..199).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut all = v.clone();
        all.extend(v.iter().map(|x: &f64| -x));
        let reps = DMatrix::from_column_slice(all.len(), 1, &all);
        let s = cma_band(&reps, &[0.0], 0.05).unwrap();
        let sd = linalg::sample_sd(&all);
        let mut z: Vec<f64> = all.iter().map(|x| x.abs() / sd).collect();
        z.sort_by(f64::total_cmp);
        assert!((s.cma_quantile - linalg::quantile_type7(&z, 0.95)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_policies() {
        let reps = DMatrix::from_element(5, 3, 2.0);
        assert!(matches!(cma_band(&reps, &[2.0; 3], 0.05), Err(FdaError::DegenerateSe { .. })));
        let mut r = DMatrix::from_element(4, 3, 0.0);
        for i in 0..4 {
            r[(i, 1)] = i as f64;
            r[(i, 2)] = 1.0;
        }
        let s = cma_band(&r, &[0.0, 1.5, 1.0], 0.05).unwrap();
        assert_eq!(s.degenerate_points, vec![0, 2]);
        assert_eq!(s.pointwise_p[0], 1.0);
        assert_eq!(s.pointwise_p[2], 0.25);
        let same = DMatrix::from_fn(10, 4, |i, j| (i * j) as f64);
        assert!(matches!(
            contrast_band(&same, &same, &[1.0; 4], &[1.0; 4], 0.05),
            Err(FdaError::DegenerateSe { .. })
        ));
        let short = DMatrix::from_element(9, 4, 0.0);
        assert!(matches!(
            contrast_band(&same, &short, &[1.0; 4], &[1.0; 4], 0.05),
            Err(FdaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn pivoting_replicates_cinch_in_the_middle() {
        // lines through (12, 0) with random slope: SE grows linearly from the pivot
        let t: Vec<f64> = (1..=24).map(|v| v as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let slopes: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let reps = DMatrix::from_fn(200, 24, |i, j| 0.01 * slopes[i] * (t[j] - 12.0));
        let est: Vec<f64> = vec![0.1; 24];
        let s = cma_band(&reps, &est, 0.05).unwrap();
        assert_eq!(s.degenerate_points, vec![11]);
        let width: Vec<f64> = (0..24).map(|j| s.cma_hi[j] - s.cma_lo[j]).collect();
        let argmin = (0..24).min_by(|&a, &b| width[a].total_cmp(&width[b])).unwrap();
        assert_eq!(argmin, 11);
        assert!(width[0] > width[5] && width[23] > width[17]);
        assert!(s.cma_quantile.is_finite());
    }

    fn gaussian_reps(rng: &mut ChaCha8Rng, b: usize, g: usize) -> DMatrix<f64> {
        // AR(1)-correlated curves
        let mut m = DMatrix::zeros(b, g);
        for r in 0..b {
            let mut prev: f64 = StandardNormal.sample(rng);
            for j in 0..g {
                let e: f64 = StandardNormal.sample(rng);
                prev = 0.7 * prev + 0.51f64.sqrt() * e;
                m[(r, j)] = prev;
            }
        }
        m
    }

    #[test]
    fn max_statistic_quantile_exceeds_normal() {
        let mut hits = 0;
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let reps = gaussian_reps(&mut rng, 300, 24);
            let s = cma_band(&reps, &vec![0.0; 24], 0.05).unwrap();
            if s.cma_quantile >= 1.96 {
                hits += 1;
            }
        }
        assert!(hits >= 99);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn band_invariants(seed in 0u64..10_000, b in 5usize..60, g in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps = gaussian_reps(&mut rng, b, g);
            let est: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s05 = cma_band(&reps, &est, 0.05).unwrap();
            let s01 = cma_band(&reps, &est, 0.01).unwrap();
            prop_assert_eq!(s05.global_p, s05.pointwise_p.iter().copied().fold(f64::INFINITY, f64::min));
            for j in 0..g {
                prop_assert!(s05.se[j] >= 0.0);
                prop_assert!(s05.cma_lo[j] <= est[j] && est[j] <= s05.cma_hi[j]);
                prop_assert!(s01.cma_lo[j] <= s05.cma_lo[j] + 1e-12 && s01.cma_hi[j] + 1e-12 >= s05.cma_hi[j]);
                // dominance over the same-replicate pointwise band
                let mean = reps.column(j).mean();
                let mut z: Vec<f64> = reps.column(j).iter().map(|v| (v - mean).abs() / s05.se[j]).collect();
                z.sort_by(f64::total_cmp);
                prop_assert!(s05.cma_quantile + 1e-12 >= linalg::quantile_type7(&z, 0.95));
                // p-value consistent with band exclusion
                let excl = s05.cma_lo[j] > 0.0 || s05.cma_hi[j] < 0.0;
                if excl { prop_assert!(s05.pointwise_p[j] <= (0.05f64).max(1.0 / b as f64) + 1e-12); }
                if s05.pointwise_p[j] < 0.05 - 1e-9 { prop_assert!(excl); }
            }
            let other = gaussian_reps(&mut rng, b, g);
            let e2: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ab = contrast_band(&reps, &other, &est, &e2, 0.05).unwrap();
            let ba = contrast_band(&other, &reps, &e2, &est, 0.05).unwrap();
            for j in 0..g {
                prop_assert!((ab.cma_lo[j] + ba.cma_hi[j]).abs() < 1e-12);
                prop_assert!((ab.cma_hi[j] + ba.cma_lo[j]).abs() < 1e-12);
            }
        }
    }

    fn labelled(n: usize, arm: &str, cohort: Option<usize>, stratum: &str) -> Vec<FunctionalSample> {
        (0..n)
            .map(|i| {
                let mut s = FunctionalSample::new(format!("{arm}{i}"), vec![1.0], vec![i as f64]).unwrap().with_arm(arm);
                s.cohort = cohort.map(|c| format!("c{}", i / c));
                s.stratum = Some(stratum.to_string());
                s
            })
            .collect()
    }

    #[test]
    fn stratified_counts_and_labels() {
        let mut s = labelled(10, "team", Some(3), "low");
        s.extend(labelled(7, "control", None, "low"));
        s.extend(labelled(5, "solo", None, "high"));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = stratified_resample(&s, None, &mut rng).unwrap();
            for arm in ["team", "control", "solo"] {
                assert_eq!(r.iter().filter(|x| x.arm == arm).count(), s.iter().filter(|x| x.arm == arm).count());
            }
            let mut ids: Vec<&String> = r.iter().map(|x| &x.subject_id).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), r.len());
        }
        let mut bad = s.clone();
        bad[12].stratum = None;
        assert!(matches!(stratified_resample(&bad, None, &mut rng), Err(FdaError::Input(_))));
    }

    #[test]
    fn size_one_cohorts_match_plain_inclusion() {
        let s = labelled(5, "a", Some(1), "x");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 5];
        let trials = 20_000;
        for _ in 0..trials {
            for x in stratified_resample(&s, None, &mut rng).unwrap() {
                counts[x.values[0] as usize] += 1;
            }
        }
        for c in counts {
            let rate = c as f64 / trials as f64;
            assert!((rate - 1.0).abs() < 0.03, "{rate}");
        }
    }

    #[test]
    fn replicate_runner_is_order_independent() {
        let f = |rng: &mut ChaCha8Rng| -> Result<u64> { Ok(rng.random::<u64>()) };
        let (a, _) = run_replicates(50, 9, f).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, _) = pool.install(|| run_replicates(50, 9, f)).unwrap();
        assert_eq!(a, b);
        let failing = |_: &mut ChaCha8Rng| -> Result<u64> { Err(FdaError::Numerical("x".into())) };
        assert!(matches!(run_replicates(20, 1, failing), Err(FdaError::Inference(_))));
    }

    #[test]
    fn scalar_percentile_p() {
        let reps: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let s = scalar_bootstrap("x", 50.0, &reps, 0.05);
        assert_eq!(s.p_value, 0.01);
        let mixed: Vec<f64> = (0..100).map(|v| v as f64 - 49.5).collect();
        assert_eq!(scalar_bootstrap("x", 0.0, &mixed, 0.05).p_value, 1.0);
    }
}
