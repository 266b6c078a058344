//! Penalized generalized least squares with subject-level ridge effects.
//!
//! The mixed model `y_i = X_i β + Φ_i ζ_i + ε_i` with a ridge on `ζ_i` is
//! solved by profiling the subject effects out: minimizing over `ζ_i` leaves
//! the weighted problem `Σ_i e_iᵀ W_i e_i + Σ_j λ_j βᵀ S_j β` with
//! `W_i = I − Φ_i (Φ_iᵀΦ_i + R)⁻¹ Φ_iᵀ` and `e_i = y_i − X_i β`. Every
//! smoothing-parameter evaluation after that touches only `p × p` matrices.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::linalg::{self, SpdFactor};

/// One quadratic penalty `λ_j βᵀ S_j β` acting on a contiguous column block.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub name: String,
    pub columns: Range<usize>,
    /// Square penalty of size `columns.len()`.
    pub matrix: DMatrix<f64>,
    /// Index of the coefficient block this penalty belongs to; several
    /// penalties may share a block (tensor-product smooths).
    pub block: usize,
}

/// Smoothing-parameter criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Gcv,
    Reml,
}

/// How smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSelection {
    /// Coordinate-wise search over a common grid, one λ per penalty.
    Search { grid: Vec<f64>, criterion: Criterion },
    /// Fixed values, one per penalty (zero allowed).
    Fixed(Vec<f64>),
}

impl Default for LambdaSelection {
    fn default() -> Self {
        LambdaSelection::Search {
            grid: default_lambda_grid(),
            criterion: Criterion::Gcv,
        }
    }
}

/// 50 log-spaced values over `1e-6 ..= 1e8`.
pub fn default_lambda_grid() -> Vec<f64> {
    linalg::log_grid(1e-6, 1e8, 50)
}

/// λ-independent sufficient statistics of the profiled problem.
#[derive(Debug, Clone)]
pub struct GlsSystem {
    pub xtwx: DMatrix<f64>,
    pub xtwy: DVector<f64>,
    pub ytwy: f64,
    pub n_obs: usize,
}

impl GlsSystem {
    /// Ordinary (unweighted) system from a dense design.
    pub fn from_design(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let xt = x.transpose();
        GlsSystem {
            xtwx: &xt * x,
            xtwy: &xt * y,
            ytwy: y.dot(y),
            n_obs: y.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.xtwy.len()
    }
}

/// One subject's rows: fixed design, response and random-effect basis.
#[derive(Debug, Clone)]
pub struct SubjectBlock {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `n_i × K` values of the random-effect basis at the subject's times.
    pub phi: DMatrix<f64>,
}

/// Long-format design split by subject with a shared ridge on the subject effects.
#[derive(Debug, Clone)]
pub struct MixedDesign {
    pub subjects: Vec<SubjectBlock>,
    /// Ridge weight per random component, `σ²_ε / σ²_ζk`.
    pub ridge: Vec<f64>,
    pub num_fixed: usize,
}

impl MixedDesign {
    pub fn num_random(&self) -> usize {
        self.ridge.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.y.len()).sum()
    }

    /// `(Φ_iᵀΦ_i + R)⁻¹` for one subject.
    fn subject_gain(&self, s: &SubjectBlock) -> Result<DMatrix<f64>> {
        let k = self.ridge.len();
        let mut g = s.phi.transpose() * &s.phi;
        for j in 0..k {
            g[(j, j)] += self.ridge[j];
        }
        SpdFactor::new(&g).map(|f| f.inverse())
    }

    /// Accumulates `XᵀWX`, `XᵀWy`, `yᵀWy`.
    pub fn gls_system(&self) -> Result<GlsSystem> {
        let p = self.num_fixed;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        let mut ytwy = 0.0;
        for s in &self.subjects {
            let xt = s.x.transpose();
            xtwx += &xt * &s.x;
            xtwy += &xt * &s.y;
            ytwy += s.y.dot(&s.y);
            if self.ridge.is_empty() {
                continue;
            }
            let g = self.subject_gain(s)?;
            let xtphi = &xt * &s.phi;
            let phity = s.phi.transpose() * &s.y;
            let xtphi_g = &xtphi * &g;
            xtwx -= &xtphi_g * xtphi.transpose();
            xtwy -= &xtphi_g * &phity;
            ytwy -= phity.dot(&(&g * &phity));
        }
        Ok(GlsSystem {
            xtwx,
            xtwy,
            ytwy,
            n_obs: self.n_obs(),
        })
    }

    /// Predicted subject effects `ζ̂_i = (Φ_iᵀΦ_i + R)⁻¹ Φ_iᵀ (y_i − X_i β)`.
    pub fn subject_effects(&self, beta: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.subjects
            .iter()
            .map(|s| {
                if self.ridge.is_empty() {
                    return Ok(DVector::zeros(0));
                }
                let g = self.subject_gain(s)?;
                let e = &s.y - &s.x * beta;
                Ok(g * (s.phi.transpose() * e))
            })
            .collect()
    }

    /// Dense `[X | Z]` with `Z` block-diagonal over subjects.
    pub fn dense(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n = self.n_obs();
        let k = self.num_random();
        let mut x = DMatrix::zeros(n, self.num_fixed);
        let mut z = DMatrix::zeros(n, k * self.subjects.len());
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for (i, s) in self.subjects.iter().enumerate() {
            let ni = s.y.len();
            x.view_mut((row, 0), (ni, self.num_fixed)).copy_from(&s.x);
            if k > 0 {
                z.view_mut((row, i * k), (ni, k)).copy_from(&s.phi);
            }
            y.rows_mut(row, ni).copy_from(&s.y);
            row += ni;
        }
        (x, z, y)
    }
}

/// Result of a penalized fit at the selected smoothing parameters.
#[derive(Debug, Clone)]
pub struct PlsFit {
    pub beta: DVector<f64>,
    pub lambdas: Vec<f64>,
    /// Whether each selected λ sits on the edge of the search grid.
    pub boundary: Vec<bool>,
    pub criterion: Option<Criterion>,
    pub criterion_value: f64,
    /// Weighted residual sum of squares `Σ e_iᵀ W_i e_i`.
    pub rss: f64,
    pub edf_total: f64,
    /// Effective degrees of freedom per coefficient block.
    pub edf_blocks: Vec<f64>,
    /// `(XᵀWX + S_λ)⁻¹`.
    pub inverse: DMatrix<f64>,
    /// Residual variance estimate `rss / (n − edf)`.
    pub scale: f64,
}

struct Evaluation {
    beta: DVector<f64>,
    inverse: DMatrix<f64>,
    rss: f64,
    edf: f64,
    gcv: f64,
    reml: f64,
}

/// Penalized solver bound to a system and its penalties.
pub struct PenalizedProblem<'a> {
    system: &'a GlsSystem,
    penalties: &'a [PenaltyTerm],
    num_blocks: usize,
    block_columns: Vec<Range<usize>>,
    block_rank: Vec<usize>,
    total_rank: usize,
}

impl<'a> PenalizedProblem<'a> {
    pub fn new(system: &'a GlsSystem, penalties: &'a [PenaltyTerm]) -> Result<Self> {
        let p = system.dim();
        let num_blocks = penalties.iter().map(|t| t.block + 1).max().unwrap_or(0);
        let mut block_columns = vec![0..0; num_blocks];
        for t in penalties {
            if t.columns.end > p || t.matrix.nrows() != t.columns.len() || !t.matrix.is_square() {
                return Err(FdaError::InvalidArgument(format!(
                    "penalty '{}' does not fit the {p}-column design",
                    t.name
                )));
            }
            let bc = &mut block_columns[t.block];
            if bc.start >= bc.end {
                *bc = t.columns.clone();
            } else if *bc != t.columns {
                return Err(FdaError::InvalidArgument(format!(
                    "penalties of block {} cover different columns",
                    t.block
                )));
            }
        }
        let mut block_rank = vec![0; num_blocks];
        for (b, cols) in block_columns.iter().enumerate() {
            if cols.is_empty() {
                continue;
            }
            let m = block_penalty(penalties, b, cols.len(), &vec![1.0; penalties.len()]);
            let (vals, _) = linalg::sorted_sym_eigen(&m);
            let max = vals[0].max(0.0);
            block_rank[b] = vals.iter().filter(|&&v| v > 1e-9 * max).count();
        }
        let total_rank = block_rank.iter().sum();
        Ok(PenalizedProblem {
            system,
            penalties,
            num_blocks,
            block_columns,
            block_rank,
            total_rank,
        })
    }

    fn penalized_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut m = self.system.xtwx.clone();
        for (t, &lam) in self.penalties.iter().zip(lambdas) {
            if lam == 0.0 {
                continue;
            }
            let c0 = t.columns.start;
            let d = t.columns.len();
            for j in 0..d {
                for i in 0..d {
                    m[(c0 + i, c0 + j)] += lam * t.matrix[(i, j)];
                }
            }
        }
        m
    }

    fn evaluate(&self, lambdas: &[f64]) -> Result<Evaluation> {
        let m = self.penalized_matrix(lambdas);
        let f = SpdFactor::new(&m)?;
        let beta = f.solve_vec(&self.system.xtwy);
        let inverse = f.inverse();
        let rss = (self.system.ytwy - 2.0 * beta.dot(&self.system.xtwy)
            + beta.dot(&(&self.system.xtwx * &beta)))
        .max(0.0);
        let edf = trace_product(&inverse, &self.system.xtwx);
        let n = self.system.n_obs as f64;
        let denom = (n - edf).max(1e-8);
        let gcv = n * rss / (denom * denom);
        // Profile REML with the scale parameter maximized out.
        let mut penalty_quad = 0.0;
        let mut log_det_s = 0.0;
        for b in 0..self.num_blocks {
            let cols = &self.block_columns[b];
            if cols.is_empty() {
                continue;
            }
            let sb = block_penalty(self.penalties, b, cols.len(), lambdas);
            let bb = beta.rows(cols.start, cols.len()).into_owned();
            penalty_quad += bb.dot(&(&sb * &bb));
            let (vals, _) = linalg::sorted_sym_eigen(&sb);
            log_det_s += vals
                .iter()
                .take(self.block_rank[b])
                .map(|v| v.max(1e-300).ln())
                .sum::<f64>();
        }
        let dof = (n - (self.system.dim() - self.total_rank) as f64).max(1.0);
        let reml = dof * (rss + penalty_quad).max(1e-300).ln() + f.log_det() - log_det_s;
        Ok(Evaluation {
            beta,
            inverse,
            rss,
            edf,
            gcv,
            reml,
        })
    }

    /// Solves at fixed smoothing parameters.
    pub fn solve(&self, lambdas: &[f64]) -> Result<PlsFit> {
        if lambdas.len() != self.penalties.len() {
            return Err(FdaError::InvalidArgument(format!(
                "expected {} smoothing parameters, got {}",
                self.penalties.len(),
                lambdas.len()
            )));
        }
        if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(FdaError::InvalidArgument(
                "smoothing parameters must be finite and non-negative".into(),
            ));
        }
        let ev = self.evaluate(lambdas)?;
        Ok(self.finish(ev, lambdas.to_vec(), vec![false; lambdas.len()], None))
    }

    fn finish(
        &self,
        ev: Evaluation,
        lambdas: Vec<f64>,
        boundary: Vec<bool>,
        criterion: Option<Criterion>,
    ) -> PlsFit {
        let n = self.system.n_obs as f64;
        let diag = product_diagonal(&ev.inverse, &self.system.xtwx);
        let edf_blocks = self
            .block_columns
            .iter()
            .map(|cols| cols.clone().map(|c| diag[c]).sum())
            .collect();
        let scale = ev.rss / (n - ev.edf).max(1e-8);
        PlsFit {
            criterion_value: match criterion {
                Some(Criterion::Reml) => ev.reml,
                _ => ev.gcv,
            },
            beta: ev.beta,
            lambdas,
            boundary,
            criterion,
            rss: ev.rss,
            edf_total: ev.edf,
            edf_blocks,
            inverse: ev.inverse,
            scale,
        }
    }

    /// Grid search: a shared-λ sweep for a starting point, then coordinate
    /// sweeps until no single penalty moves.
    pub fn search(&self, grid: &[f64], criterion: Criterion) -> Result<PlsFit> {
        if grid.is_empty() {
            return Err(FdaError::InvalidArgument("lambda grid is empty".into()));
        }
        if grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(FdaError::InvalidArgument(
                "lambda grid values must be positive and finite".into(),
            ));
        }
        let np = self.penalties.len();
        if np == 0 {
            let ev = self.evaluate(&[])?;
            return Ok(self.finish(ev, vec![], vec![], Some(criterion)));
        }
        if np == 1 {
            if let Some(fit) = self.search_single(grid, criterion)? {
                return Ok(fit);
            }
        }
        let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut score = |idx: &[usize]| -> Result<f64> {
            if let Some(v) = cache.get(idx) {
                return Ok(*v);
            }
            let lambdas: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
            let v = match self.evaluate(&lambdas) {
                Ok(ev) => match criterion {
                    Criterion::Gcv => ev.gcv,
                    Criterion::Reml => ev.reml,
                },
                Err(FdaError::Numerical(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let v = if v.is_nan() { f64::INFINITY } else { v };
            cache.insert(idx.to_vec(), v);
            Ok(v)
        };

        let mut best_idx = vec![0; np];
        let mut best = f64::INFINITY;
        for g in 0..grid.len() {
            let idx = vec![g; np];
            let v = score(&idx)?;
            if v < best {
                best = v;
                best_idx = idx;
            }
        }
        if np > 1 {
            for _sweep in 0..20 {
                let mut moved = false;
                for j in 0..np {
                    let mut cand = best_idx.clone();
                    for g in 0..grid.len() {
                        cand[j] = g;
                        let v = score(&cand)?;
                        if v < best {
                            best = v;
                            best_idx = cand.clone();
                            moved = true;
                        }
                    }
                }
                if !moved {
                    break;
                }
            }
        }
        if !best.is_finite() {
            // every point failed; surface the error from the middle of the grid
            let lambdas = vec![grid[grid.len() / 2]; np];
            self.evaluate(&lambdas)?;
            return Err(FdaError::Numerical(
                "smoothing-parameter search found no finite criterion value".into(),
            ));
        }
        let lambdas: Vec<f64> = best_idx.iter().map(|&i| grid[i]).collect();
        let boundary = best_idx
            .iter()
            .map(|&i| grid.len() > 1 && (i == 0 || i == grid.len() - 1))
            .collect();
        let ev = self.evaluate(&lambdas)?;
        Ok(self.finish(ev, lambdas, boundary, Some(criterion)))
    }

    /// One-penalty search through the Demmler-Reinsch diagonalization
    /// `R⁻ᵀ S R⁻¹ = U D Uᵀ` with `XᵀWX ≈ RᵀR`: each grid point then costs `O(p)`.
    /// Returns `None` when `XᵀWX` is too close to singular for the transform.
    fn search_single(&self, grid: &[f64], criterion: Criterion) -> Result<Option<PlsFit>> {
        let p = self.system.dim();
        let a = &self.system.xtwx;
        let mean_diag = (0..p).map(|i| a[(i, i)]).sum::<f64>() / p as f64;
        if !(mean_diag > 0.0) {
            return Ok(None);
        }
        let mut reg = a.clone();
        for i in 0..p {
            reg[(i, i)] += 1e-10 * mean_diag;
        }
        let Some(chol) = reg.cholesky() else {
            return Ok(None);
        };
        let r = chol.l().transpose();
        let Some(r_inv) = r.clone().try_inverse() else {
            return Ok(None);
        };
        let s = self.penalty_matrix(&[1.0]);
        let k = r_inv.transpose() * &s * &r_inv;
        let (d, u) = linalg::sorted_sym_eigen(&k);
        let c = u.transpose() * (r_inv.transpose() * &self.system.xtwy);
        let log_det_a: f64 = (0..p).map(|i| 2.0 * r[(i, i)].ln()).sum();
        let n = self.system.n_obs as f64;
        let rank = self.total_rank as f64;
        let dof = (n - (p - self.total_rank) as f64).max(1.0);
        let mut best = (f64::INFINITY, 0usize);
        for (gi, &lam) in grid.iter().enumerate() {
            let mut rss = self.system.ytwy;
            let mut edf = 0.0;
            let mut quad = 0.0;
            let mut log_det = log_det_a;
            for i in 0..p {
                let di = d[i].max(0.0);
                let f = 1.0 / (1.0 + lam * di);
                rss -= c[i] * c[i] * (2.0 * f - f * f);
                edf += f;
                quad += lam * di * c[i] * c[i] * f * f;
                log_det += (1.0 + lam * di).ln();
            }
            let rss = rss.max(0.0);
            let v = match criterion {
                Criterion::Gcv => {
                    let den = (n - edf).max(1e-8);
                    n * rss / (den * den)
                }
                Criterion::Reml => dof * (rss + quad).max(1e-300).ln() + log_det - rank * lam.ln(),
            };
            if v < best.0 {
                best = (v, gi);
            }
        }
        if !best.0.is_finite() {
            return Ok(None);
        }
        let lambdas = vec![grid[best.1]];
        let boundary = vec![grid.len() > 1 && (best.1 == 0 || best.1 == grid.len() - 1)];
        let ev = self.evaluate(&lambdas)?;
        Ok(Some(self.finish(ev, lambdas, boundary, Some(criterion))))
    }

    pub fn fit(&self, selection: &LambdaSelection) -> Result<PlsFit> {
        match selection {
            LambdaSelection::Fixed(l) => self.solve(l),
            LambdaSelection::Search { grid, criterion } => self.search(grid, *criterion),
        }
    }

    /// `Σ λ_j S_j` embedded in the full `p × p` space.
    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let mut m = self.penalized_matrix(lambdas);
        m -= &self.system.xtwx;
        m
    }
}

fn block_penalty(penalties: &[PenaltyTerm], block: usize, dim: usize, lambdas: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for (t, &lam) in penalties.iter().zip(lambdas) {
        if t.block == block {
            m += &t.matrix * lam;
        }
    }
    m
}

/// `tr(A B)` for square matrices without forming the product.
pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    product_diagonal(a, b).iter().sum()
}

fn product_diagonal(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    (0..n)
        .map(|i| (0..n).map(|k| a[(i, k)] * b[(k, i)]).sum())
        .collect()
}

/// Penalized least squares on a dense design with identity weights.
pub fn penalized_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalties: &[PenaltyTerm],
    selection: &LambdaSelection,
) -> Result<PlsFit> {
    let system = GlsSystem::from_design(x, y);
    PenalizedProblem::new(&system, penalties)?.fit(selection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::difference_penalty;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_first_difference_ridge() {
        let x = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let pen = vec![PenaltyTerm {
            name: "b".into(),
            columns: 0..2,
            matrix: difference_penalty(2, 1).unwrap().gram(),
            block: 0,
        }];
        let fit = penalized_least_squares(&x, &y, &pen, &LambdaSelection::Fixed(vec![1.0])).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.beta[1], 5.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn empty_grid_rejected() {
        let x = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let sel = LambdaSelection::Search {
            grid: vec![],
            criterion: Criterion::Gcv,
        };
        assert!(matches!(
            penalized_least_squares(&x, &y, &[], &sel),
            Err(FdaError::InvalidArgument(_))
        ));
    }

    /// Profiling the ridge effects must agree with solving the joint system.
    #[test]
    fn profiled_solution_matches_joint_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = 5;
        let k = 2;
        let ridge = vec![0.7, 2.5];
        let subjects: Vec<SubjectBlock> = (0..6)
            .map(|i| {
                let ni = 3 + i % 3;
                SubjectBlock {
                    x: DMatrix::from_fn(ni, p, |_, _| rng.random_range(-1.0..1.0)),
                    y: DVector::from_fn(ni, |_, _| rng.random_range(-1.0..1.0)),
                    phi: DMatrix::from_fn(ni, k, |_, _| rng.random_range(-1.0..1.0)),
                }
            })
            .collect();
        let design = MixedDesign {
            subjects,
            ridge: ridge.clone(),
            num_fixed: p,
        };
        let pen = vec![PenaltyTerm {
            name: "s".into(),
            columns: 1..5,
            matrix: difference_penalty(4, 2).unwrap().gram(),
            block: 0,
        }];
        let sys = design.gls_system().unwrap();
        let fit = PenalizedProblem::new(&sys, &pen).unwrap().solve(&[0.3]).unwrap();

        let (x, z, y) = design.dense();
        let q = z.ncols();
        let mut c = DMatrix::zeros(x.nrows(), p + q);
        c.view_mut((0, 0), x.shape()).copy_from(&x);
        c.view_mut((0, p), z.shape()).copy_from(&z);
        let mut s = DMatrix::zeros(p + q, p + q);
        s.view_mut((1, 1), (4, 4)).copy_from(&(difference_penalty(4, 2).unwrap().gram() * 0.3));
        for i in 0..q {
            s[(p + i, p + i)] = ridge[i % k];
        }
        let m = c.transpose() * &c + s;
        let sol = m.cholesky().unwrap().solve(&(c.transpose() * &y));
        for j in 0..p {
            assert_abs_diff_eq!(fit.beta[j], sol[j], epsilon = 1e-10);
        }
        let eff = design.subject_effects(&fit.beta).unwrap();
        for (i, e) in eff.iter().enumerate() {
            for j in 0..k {
                assert_abs_diff_eq!(e[j], sol[p + i * k + j], epsilon = 1e-10);
            }
        }
        // weighted RSS equals the conditional residual norm
        let resid = &y - &c * &sol;
        let cond_rss: f64 = design
            .subjects
            .iter()
            .zip(&eff)
            .map(|(sb, e)| (&sb.y - &sb.x * &fit.beta - &sb.phi * e).norm_squared())
            .sum();
        assert_abs_diff_eq!(cond_rss, resid.norm_squared(), epsilon = 1e-10);
    }

    #[test]
    fn single_penalty_fast_path_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let b = crate::basis::BasisSystem::cubic(0.0, 1.0, 9).unwrap();
        let x = b.evaluate(&t).unwrap();
        let y = DVector::from_iterator(n, t.iter().map(|&s| s * s + 0.2 * rng.random_range(-1.0..1.0)));
        let pen = vec![PenaltyTerm {
            name: "f".into(),
            columns: 0..9,
            matrix: b.penalty().gram(),
            block: 0,
        }];
        let sys = GlsSystem::from_design(&x, &y);
        let prob = PenalizedProblem::new(&sys, &pen).unwrap();
        let grid = linalg::log_grid(1e-4, 1e4, 17);
        for crit in [Criterion::Gcv, Criterion::Reml] {
            let fast = prob.search(&grid, crit).unwrap();
            let mut best = (f64::INFINITY, 0.0);
            for &l in &grid {
                let ev = prob.evaluate(&[l]).unwrap();
                let v = if crit == Criterion::Gcv { ev.gcv } else { ev.reml };
                if v < best.0 {
                    best = (v, l);
                }
            }
            assert_eq!(fast.lambdas[0], best.1, "{crit:?}");
            assert_abs_diff_eq!(fast.criterion_value, best.0, epsilon = 1e-8 * best.0.abs().max(1.0));
        }
    }

    #[test]
    fn reml_and_gcv_searches_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let b = crate::basis::BasisSystem::cubic(0.0, 1.0, 12).unwrap();
        let x = b.evaluate(&t).unwrap();
        let y = DVector::from_iterator(
            n,
            t.iter().map(|&s| (6.0 * s).sin() + 0.1 * rng.random_range(-1.0..1.0)),
        );
        let pen = vec![PenaltyTerm {
            name: "f".into(),
            columns: 0..12,
            matrix: b.penalty().gram(),
            block: 0,
        }];
        for crit in [Criterion::Gcv, Criterion::Reml] {
            let sel = LambdaSelection::Search {
                grid: default_lambda_grid(),
                criterion: crit,
            };
            let fit = penalized_least_squares(&x, &y, &pen, &sel).unwrap();
            assert!(fit.edf_blocks[0] > 3.0 && fit.edf_blocks[0] < 12.0);
            let fitted = &x * &fit.beta;
            let mse: f64 = fitted
                .iter()
                .zip(&t)
                .map(|(f, s)| (f - (6.0 * s).sin()).powi(2))
                .sum::<f64>()
                / n as f64;
            assert!(mse < 2e-3, "{crit:?} mse {mse}");
        }
    }
}
