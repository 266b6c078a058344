//! Functional principal components for irregular, partially missing curves.
//!
//! Steps: pointwise mean on the grid, pairwise-complete raw covariance,
//! tensor P-spline smoothing of the off-diagonal cells, PSD projection and
//! quadrature-weighted eigendecomposition, then best linear unbiased score
//! prediction from each subject's observed points.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{kron, BasisSystem};
use crate::error::{FdaError, Result};
use crate::linalg::{self, SpdFactor};
use crate::pls::{Criterion, GlsSystem, PenalizedProblem, PenaltyTerm};
use crate::sample::FunctionalSample;

/// Bivariate P-spline settings for the covariance surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSmoothing {
    /// Marginal basis size (capped at the grid length).
    pub num_basis: usize,
    pub lambda_grid: Vec<f64>,
}

impl Default for CovarianceSmoothing {
    fn default() -> Self {
        CovarianceSmoothing {
            num_basis: 10,
            lambda_grid: linalg::log_grid(1e-6, 1e8, 50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpcaConfig {
    pub pve_threshold: f64,
    /// Overrides the PVE rule when set (capped at the number of positive eigenvalues).
    pub num_components: Option<usize>,
    pub smoothing: CovarianceSmoothing,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        FpcaConfig {
            pve_threshold: 0.95,
            num_components: None,
            smoothing: CovarianceSmoothing::default(),
        }
    }
}

/// Karhunen-Loève fit on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaResult {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// `|grid| × K`, orthonormal under trapezoidal quadrature.
    pub eigenfunctions: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// `n × K`, rows aligned with `subject_ids`.
    pub scores: DMatrix<f64>,
    pub subject_ids: Vec<String>,
    pub noise_variance: f64,
    /// Cumulative proportion of variance over all positive eigenvalues.
    pub pve: Vec<f64>,
}

impl FpcaResult {
    pub fn num_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Keeps the first `k` components (scores are left unchanged).
    pub fn truncate(&self, k: usize) -> FpcaResult {
        let k = k.min(self.num_components());
        FpcaResult {
            grid: self.grid.clone(),
            mean: self.mean.clone(),
            eigenfunctions: self.eigenfunctions.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues[..k].to_vec(),
            scores: self.scores.columns(0, k).into_owned(),
            subject_ids: self.subject_ids.clone(),
            noise_variance: self.noise_variance,
            pve: self.pve.clone(),
        }
    }

    pub fn mean_at(&self, t: f64) -> Result<f64> {
        linalg::interpolate(&self.grid, &self.mean, t)
    }

    /// `φ_1(t) … φ_K(t)` by linear interpolation on the grid.
    pub fn eigenfunctions_at(&self, t: f64) -> Result<Vec<f64>> {
        (0..self.num_components())
            .map(|k| {
                let col: Vec<f64> = self.eigenfunctions.column(k).iter().copied().collect();
                linalg::interpolate(&self.grid, &col, t)
            })
            .collect()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }

    /// Summary JSON: grid, mean, eigenfunctions (one array per component),
    /// eigenvalues, pve and noise variance.
    pub fn to_json(&self) -> serde_json::Value {
        let efs: Vec<Vec<f64>> = (0..self.num_components())
            .map(|k| self.eigenfunctions.column(k).iter().copied().collect())
            .collect();
        serde_json::json!({
            "grid": self.grid,
            "mean": self.mean,
            "eigenfunctions": efs,
            "eigenvalues": self.eigenvalues,
            "pve": self.pve,
            "noise_variance": self.noise_variance,
        })
    }

    /// `subject_id,score_1,…,score_K`.
    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=self.num_components()).map(|k| format!("score_{k}")));
        w.write_record(&header)?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..self.num_components()).map(|k| format!("{}", self.scores[(i, k)])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Union of observed times rounded to whole units (weeks), ascending.
pub fn default_grid(samples: &[FunctionalSample]) -> Vec<f64> {
    let mut g: Vec<i64> = samples
        .iter()
        .flat_map(|s| s.times.iter().map(|t| t.round() as i64))
        .collect();
    g.sort_unstable();
    g.dedup();
    g.into_iter().map(|v| v as f64).collect()
}

/// Observations binned to the nearest grid point; repeated hits are averaged.
fn bin_to_grid(sample: &FunctionalSample, grid: &[f64]) -> Result<Vec<(usize, f64)>> {
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let tol = 1e-9 * (1.0 + (hi - lo).abs());
    let mut acc: Vec<(usize, f64, usize)> = Vec::new();
    for (&t, &v) in sample.times.iter().zip(&sample.values) {
        if t < lo - tol || t > hi + tol {
            return Err(FdaError::Input(format!(
                "subject '{}': time {t} outside the FPCA grid [{lo}, {hi}]",
                sample.subject_id
            )));
        }
        let j = linalg::nearest_index(grid, t);
        match acc.iter_mut().find(|e| e.0 == j) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => acc.push((j, v, 1)),
        }
    }
    acc.sort_by_key(|e| e.0);
    Ok(acc.into_iter().map(|(j, s, c)| (j, s / c as f64)).collect())
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(FdaError::InvalidArgument("FPCA grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(FdaError::InvalidArgument("FPCA grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Fits the decomposition on `grid`.
pub fn fit_fpca(samples: &[FunctionalSample], grid: &[f64], config: &FpcaConfig) -> Result<FpcaResult> {
    if samples.len() < 2 {
        return Err(FdaError::Input(format!(
            "FPCA needs at least two subjects, got {}",
            samples.len()
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.is_empty()) {
        return Err(FdaError::Input(format!(
            "subject '{}' has no observations",
            s.subject_id
        )));
    }
    if !(config.pve_threshold > 0.0 && config.pve_threshold <= 1.0) {
        return Err(FdaError::InvalidArgument(format!(
            "pve threshold {} not in (0, 1]",
            config.pve_threshold
        )));
    }
    validate_grid(grid)?;
    let mut seen = HashMap::new();
    for s in samples {
        if seen.insert(s.subject_id.as_str(), ()).is_some() {
            return Err(FdaError::Input(format!("duplicate subject id '{}'", s.subject_id)));
        }
    }
    let g = grid.len();
    let n = samples.len();
    let binned: Vec<Vec<(usize, f64)>> = samples
        .iter()
        .map(|s| bin_to_grid(s, grid))
        .collect::<Result<_>>()?;

    let mean = pointwise_mean(&binned, grid);

    // centered values and observation mask
    let mut centered = DMatrix::zeros(n, g);
    let mut mask = DMatrix::zeros(n, g);
    for (i, obs) in binned.iter().enumerate() {
        for &(j, v) in obs {
            centered[(i, j)] = v - mean[j];
            mask[(i, j)] = 1.0;
        }
    }
    let cross = centered.transpose() * &centered;
    let counts = mask.transpose() * &mask;
    let mut raw = DMatrix::from_element(g, g, f64::NAN);
    for s in 0..g {
        for t in 0..g {
            let c = counts[(s, t)];
            if c >= 2.0 {
                raw[(s, t)] = cross[(s, t)] / (c - 1.0);
            }
        }
    }

    let smooth = smooth_covariance(&raw, &counts, grid, &config.smoothing)?;

    let mut diff_sum = 0.0;
    let mut diff_n = 0usize;
    for j in 0..g {
        if raw[(j, j)].is_finite() {
            diff_sum += raw[(j, j)] - smooth[(j, j)];
            diff_n += 1;
        }
    }
    let noise_variance = if diff_n > 0 {
        (diff_sum / diff_n as f64).max(0.0)
    } else {
        0.0
    };

    let weights = linalg::trapezoid_weights(grid);
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut weighted = smooth.clone();
    for s in 0..g {
        for t in 0..g {
            weighted[(s, t)] *= sqrt_w[s] * sqrt_w[t];
        }
    }
    let (vals, vecs) = linalg::sorted_sym_eigen(&weighted);
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(FdaError::Numerical("covariance eigendecomposition produced non-finite values".into()));
    }
    let top = vals[0].max(0.0);
    // PSD projection: eigenvalues at or below numerical zero are dropped.
    let positive: Vec<usize> = (0..g).filter(|&k| vals[k] > 1e-12 * top.max(f64::MIN_POSITIVE)).collect();
    check_psd_projection(&vals, &vecs, &positive)?;

    let domain = grid[g - 1] - grid[0];
    let (eigenvalues_all, eigenfunctions_all, pve) = if positive.is_empty() {
        // all curves share one shape: a single flat component of negligible variance
        let c = 1.0 / domain.sqrt();
        let floor = 1e-12 * (1.0 + mean.iter().map(|m| m * m).sum::<f64>() / g as f64);
        (vec![floor], DMatrix::from_element(g, 1, c), vec![1.0])
    } else {
        let total: f64 = positive.iter().map(|&k| vals[k]).sum();
        let mut pve = Vec::with_capacity(positive.len());
        let mut acc = 0.0;
        for &k in &positive {
            acc += vals[k];
            pve.push((acc / total).min(1.0));
        }
        *pve.last_mut().unwrap() = 1.0;
        let mut phi = DMatrix::zeros(g, positive.len());
        for (c, &k) in positive.iter().enumerate() {
            for s in 0..g {
                phi[(s, c)] = vecs[(s, k)] / sqrt_w[s];
            }
        }
        (positive.iter().map(|&k| vals[k]).collect::<Vec<f64>>(), phi, pve)
    };

    let k = match config.num_components {
        Some(k) => k.min(eigenvalues_all.len()),
        None => pve
            .iter()
            .position(|&p| p >= config.pve_threshold)
            .map(|i| i + 1)
            .unwrap_or(pve.len()),
    };
    let mut eigenfunctions = eigenfunctions_all.columns(0, k).into_owned();
    let eigenvalues = eigenvalues_all[..k].to_vec();
    fix_signs(&mut eigenfunctions, grid, &weights);

    let scores = predict_scores(&binned, &mean, &eigenfunctions, &eigenvalues, noise_variance);

    Ok(FpcaResult {
        grid: grid.to_vec(),
        mean,
        eigenfunctions,
        eigenvalues,
        scores,
        subject_ids: samples.iter().map(|s| s.subject_id.clone()).collect(),
        noise_variance,
        pve,
    })
}

fn pointwise_mean(binned: &[Vec<(usize, f64)>], grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut sum = vec![0.0; g];
    let mut cnt = vec![0usize; g];
    for obs in binned {
        for &(j, v) in obs {
            sum[j] += v;
            cnt[j] += 1;
        }
    }
    let known: Vec<usize> = (0..g).filter(|&j| cnt[j] > 0).collect();
    let kt: Vec<f64> = known.iter().map(|&j| grid[j]).collect();
    let kv: Vec<f64> = known.iter().map(|&j| sum[j] / cnt[j] as f64).collect();
    (0..g)
        .map(|j| {
            if cnt[j] > 0 {
                sum[j] / cnt[j] as f64
            } else if grid[j] <= kt[0] {
                kv[0]
            } else if grid[j] >= kt[kt.len() - 1] {
                kv[kv.len() - 1]
            } else {
                linalg::interpolate(&kt, &kv, grid[j]).expect("inside observed range")
            }
        })
        .collect()
}

/// Smooths the off-diagonal raw covariance with a symmetric tensor P-spline
/// weighted by pair counts, then evaluates the surface on the full grid.
fn smooth_covariance(
    raw: &DMatrix<f64>,
    counts: &DMatrix<f64>,
    grid: &[f64],
    cfg: &CovarianceSmoothing,
) -> Result<DMatrix<f64>> {
    let g = grid.len();
    let kc = cfg.num_basis.min(g).max(2);
    let degree = 3.min(kc - 1);
    let order = 2.min(kc - 1);
    let basis = BasisSystem::new(grid[0], grid[g - 1], kc, degree, order)?;
    let local: Vec<(usize, Vec<f64>)> = grid
        .iter()
        .map(|&t| basis.evaluate_local(t))
        .collect::<Result<_>>()?;
    let dim = kc * kc;
    let mut xtwx = DMatrix::zeros(dim, dim);
    let mut xtwy = DVector::zeros(dim);
    let mut ytwy = 0.0;
    let mut cells = 0usize;
    let mut idx = Vec::new();
    let mut val = Vec::new();
    for s in 0..g {
        for t in 0..g {
            if s == t || !raw[(s, t)].is_finite() {
                continue;
            }
            let w = counts[(s, t)];
            let y = raw[(s, t)];
            idx.clear();
            val.clear();
            let (fs, vs) = &local[s];
            let (ft, vt) = &local[t];
            for (a, va) in vs.iter().enumerate() {
                for (b, vb) in vt.iter().enumerate() {
                    idx.push((fs + a) * kc + ft + b);
                    val.push(va * vb);
                }
            }
            for (p, &ip) in idx.iter().enumerate() {
                xtwy[ip] += w * val[p] * y;
                for (q, &iq) in idx.iter().enumerate() {
                    xtwx[(ip, iq)] += w * val[p] * val[q];
                }
            }
            ytwy += w * y * y;
            cells += 1;
        }
    }
    if cells < 4 {
        return Err(FdaError::Input(format!(
            "covariance not estimable: only {cells} off-diagonal cells have two or more subjects observed"
        )));
    }
    let s1 = basis.penalty().gram();
    let eye = DMatrix::identity(kc, kc);
    let penalty = kron(&s1, &eye) + kron(&eye, &s1);
    let system = GlsSystem {
        xtwx,
        xtwy,
        ytwy,
        n_obs: cells,
    };
    let terms = [PenaltyTerm {
        name: "covariance".into(),
        columns: 0..dim,
        matrix: penalty,
        block: 0,
    }];
    let fit = PenalizedProblem::new(&system, &terms)?.search(&cfg.lambda_grid, Criterion::Gcv)?;
    let theta = DMatrix::from_row_slice(kc, kc, fit.beta.as_slice());
    let b = basis.evaluate(grid)?;
    let surface = &b * theta * b.transpose();
    Ok((&surface + surface.transpose()) * 0.5)
}

fn check_psd_projection(vals: &[f64], vecs: &DMatrix<f64>, keep: &[usize]) -> Result<()> {
    if keep.is_empty() {
        return Ok(());
    }
    let g = vecs.nrows();
    let mut proj = DMatrix::zeros(g, g);
    for &k in keep {
        let v = vecs.column(k);
        proj += vals[k] * v * v.transpose();
    }
    let (pv, _) = linalg::sorted_sym_eigen(&proj);
    let min = *pv.last().unwrap();
    if min < -1e-8 * pv[0].abs().max(f64::MIN_POSITIVE) {
        return Err(FdaError::Numerical(format!(
            "covariance not positive semidefinite after projection (min eigenvalue {min:.3e}, max {:.3e})",
            pv[0]
        )));
    }
    Ok(())
}

/// Orients each eigenfunction so its integral is non-negative; when the
/// integral vanishes, the value nearest the domain midpoint decides.
pub fn fix_signs(phi: &mut DMatrix<f64>, grid: &[f64], weights: &[f64]) {
    let g = grid.len();
    let mid = linalg::nearest_index(grid, 0.5 * (grid[0] + grid[g - 1]));
    for k in 0..phi.ncols() {
        let col = phi.column(k);
        let integral: f64 = col.iter().zip(weights).map(|(v, w)| v * w).sum();
        let scale: f64 = col.iter().zip(weights).map(|(v, w)| v.abs() * w).sum();
        let flip = if integral.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
            integral < 0.0
        } else {
            col[mid] < 0.0
        };
        if flip {
            phi.column_mut(k).neg_mut();
        }
    }
}

/// Conditional expectations `(Φ_iᵀΦ_i + σ²Λ⁻¹)⁻¹ Φ_iᵀ (y_i − μ_i)`.
fn predict_scores(
    binned: &[Vec<(usize, f64)>],
    mean: &[f64],
    phi: &DMatrix<f64>,
    eigenvalues: &[f64],
    noise_variance: f64,
) -> DMatrix<f64> {
    let n = binned.len();
    let k = eigenvalues.len();
    let mut scores = DMatrix::zeros(n, k);
    if k == 0 {
        return scores;
    }
    let sigma2 = noise_variance.max(1e-10 * eigenvalues[0]);
    let rows: Vec<Vec<f64>> = binned
        .par_iter()
        .map(|obs| {
            let mut a = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for &(j, v) in obs {
                let r = v - mean[j];
                for p in 0..k {
                    b[p] += phi[(j, p)] * r;
                    for q in 0..k {
                        a[(p, q)] += phi[(j, p)] * phi[(j, q)];
                    }
                }
            }
            for p in 0..k {
                a[(p, p)] += sigma2 / eigenvalues[p];
            }
            match SpdFactor::new(&a) {
                Ok(f) => f.solve_vec(&b).iter().copied().collect(),
                Err(_) => vec![0.0; k],
            }
        })
        .collect();
    for (i, r) in rows.into_iter().enumerate() {
        for p in 0..k {
            scores[(i, p)] = r[p];
        }
    }
    scores
}

/// Fills every grid point a subject did not observe with `μ(t) + Σ ξ̂_k φ_k(t)`;
/// observed points are copied through unchanged.
pub fn impute_curves(fit: &FpcaResult, samples: &[FunctionalSample], grid: &[f64]) -> Result<DMatrix<f64>> {
    validate_grid(grid)?;
    let mean: Vec<f64> = grid.iter().map(|&t| fit.mean_at(t)).collect::<Result<_>>()?;
    let phis: Vec<Vec<f64>> = grid
        .iter()
        .map(|&t| fit.eigenfunctions_at(t))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let i = fit.subject_index(&s.subject_id).ok_or_else(|| {
                FdaError::Input(format!("subject '{}' is not part of the FPCA fit", s.subject_id))
            })?;
            let tol = 1e-9 * (1.0 + (grid[grid.len() - 1] - grid[0]).abs());
            let row = grid
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let hits: Vec<f64> = s
                        .times
                        .iter()
                        .zip(&s.values)
                        .filter(|(&ts, _)| (ts - t).abs() <= tol)
                        .map(|(_, &v)| v)
                        .collect();
                    if let Some(&v) = hits.first() {
                        v
                    } else {
                        mean[j]
                            + phis[j]
                                .iter()
                                .enumerate()
                                .map(|(k, p)| fit.scores[(i, k)] * p)
                                .sum::<f64>()
                    }
                })
                .collect();
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(samples.len(), grid.len());
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}
