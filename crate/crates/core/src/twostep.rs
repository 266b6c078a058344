//! FPCA scores regressed on baseline covariates, then mapped back to
//! functional coefficients through the eigenfunctions.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{FdaError, Result};
use crate::fpca::{self, FpcaConfig, FpcaResult};
use crate::fosr::INTERCEPT;
use crate::sample::FunctionalSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    /// Holm-adjusted within the component; `None` for the intercept.
    pub adj_p_value: Option<f64>,
}

/// OLS of one score on the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRegression {
    /// 1-based eigenfunction index.
    pub component: usize,
    pub terms: Vec<TermEstimate>,
    pub residual_variance: f64,
}

impl ScoreRegression {
    pub fn estimate(&self, term: &str) -> Result<f64> {
        self.terms
            .iter()
            .find(|t| t.term == term)
            .map(|t| t.estimate)
            .ok_or_else(|| FdaError::Lookup {
                kind: "term",
                name: term.to_string(),
            })
    }
}

/// Columns of `[1 | X]` that are (numerically) combinations of earlier ones,
/// each with the earlier columns it loads on.
fn collinear_columns(design: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let p = design.ncols();
    let mut basis: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut out = Vec::new();
    for j in 0..p {
        let col = design.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        let mut loads = Vec::new();
        for (i, q) in &basis {
            let c = q.dot(&r);
            r -= q * c;
            if c.abs() > 1e-8 * norm.max(f64::MIN_POSITIVE) {
                loads.push(names[*i].clone());
            }
        }
        let rn = r.norm();
        if rn <= 1e-9 * norm.max(1.0) {
            out.push(if loads.is_empty() {
                format!("'{}' (all zero)", names[j])
            } else {
                format!("'{}' (combination of {})", names[j], loads.join(", "))
            });
        } else {
            basis.push((j, r / rn));
        }
    }
    out
}

/// Independent OLS per score column with an intercept; homoskedastic SEs and
/// two-sided t-test p-values, Holm-adjusted over the covariates.
pub fn regress_scores(fpca: &FpcaResult, covariates: &DMatrix<f64>, names: &[String]) -> Result<Vec<ScoreRegression>> {
    let n = fpca.scores.nrows();
    let m = covariates.ncols();
    if covariates.nrows() != n {
        return Err(FdaError::InvalidArgument(format!(
            "{} covariate rows for {n} score rows",
            covariates.nrows()
        )));
    }
    if names.len() != m {
        return Err(FdaError::InvalidArgument(format!("{} names for {m} covariates", names.len())));
    }
    if n <= m + 1 {
        return Err(FdaError::Input(format!(
            "score regression needs more than {} subjects, got {n}",
            m + 1
        )));
    }
    let mut design = DMatrix::from_element(n, m + 1, 1.0);
    design.view_mut((0, 1), (n, m)).copy_from(covariates);
    let mut all_names = vec![INTERCEPT.to_string()];
    all_names.extend(names.iter().cloned());
    let bad = collinear_columns(&design, &all_names);
    if !bad.is_empty() {
        return Err(FdaError::Input(format!(
            "covariate matrix is rank deficient: {}",
            bad.join("; ")
        )));
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| FdaError::Numerical("singular R factor in score regression".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let df = (n - m - 1) as f64;
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| FdaError::Numerical(e.to_string()))?;
    let mut out = Vec::with_capacity(fpca.num_components());
    for k in 0..fpca.num_components() {
        let y = fpca.scores.column(k).into_owned();
        let qty = qr.q().transpose() * &y;
        let beta = &r_inv * qty;
        let resid = &y - &design * &beta;
        let s2 = resid.dot(&resid) / df;
        let mut terms: Vec<TermEstimate> = (0..=m)
            .map(|j| {
                let se = (s2 * xtx_inv[(j, j)]).max(0.0).sqrt();
                let est = beta[j];
                let p = if se > 0.0 {
                    (2.0 * (1.0 - tdist.cdf((est / se).abs()))).clamp(0.0, 1.0)
                } else if est == 0.0 {
                    1.0
                } else {
                    0.0
                };
                TermEstimate {
                    term: all_names[j].clone(),
                    estimate: est,
                    std_error: se,
                    p_value: p,
                    adj_p_value: None,
                }
            })
            .collect();
        let raw: Vec<f64> = terms[1..].iter().map(|t| t.p_value).collect();
        let adj = holm_adjust(&raw)?;
        for (t, a) in terms[1..].iter_mut().zip(adj) {
            t.adj_p_value = Some(a);
        }
        out.push(ScoreRegression {
            component: k + 1,
            terms,
            residual_variance: s2,
        });
    }
    Ok(out)
}

/// Holm step-down adjustment; ties keep their original order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(FdaError::InvalidArgument(format!("p-value {v} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let v = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(v);
        out[i] = running;
    }
    Ok(out)
}

/// Induced coefficient functions on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepFit {
    pub grid: Vec<f64>,
    pub score_regressions: Vec<ScoreRegression>,
    /// `μ(t) + Σ_k γ_k0 φ_k(t)`.
    pub induced_intercept: Vec<f64>,
    /// `(name, Σ_k γ_km φ_k(t))` per covariate.
    pub induced_coefficients: Vec<(String, Vec<f64>)>,
    pub num_components: usize,
}

impl TwoStepFit {
    /// Curve by name, the intercept included.
    pub fn coefficient(&self, name: &str) -> Result<&[f64]> {
        if name == INTERCEPT {
            return Ok(&self.induced_intercept);
        }
        self.induced_coefficients
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| FdaError::Lookup {
                kind: "induced coefficient",
                name: name.to_string(),
            })
    }

    /// `eigenfunction,term,estimate,std_error,p_value,adj_p_value`.
    pub fn write_tables_csv<W: Write>(&self, out: W) -> Result<()> {
        write_tables_csv(&self.score_regressions, out)
    }

    /// `covariate,t,estimate`.
    pub fn write_coefficients_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["covariate", "t", "estimate"])?;
        let all = std::iter::once((INTERCEPT.to_string(), self.induced_intercept.clone()))
            .chain(self.induced_coefficients.iter().cloned());
        for (name, v) in all {
            for (t, e) in self.grid.iter().zip(v) {
                w.write_record([name.clone(), format!("{t}"), format!("{e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_tables_csv<W: Write>(tables: &[ScoreRegression], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eigenfunction", "term", "estimate", "std_error", "p_value", "adj_p_value"])?;
    for reg in tables {
        for t in &reg.terms {
            w.write_record([
                reg.component.to_string(),
                t.term.clone(),
                format!("{}", t.estimate),
                format!("{}", t.std_error),
                format!("{}", t.p_value),
                t.adj_p_value.map(|v| format!("{v}")).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `γ_m(t) = Σ_k γ_km φ_k(t)` and `γ_0(t) = μ(t) + Σ_k γ_k0 φ_k(t)`.
pub fn induce_functional_coefficients(
    tables: &[ScoreRegression],
    fpca: &FpcaResult,
    grid: &[f64],
) -> Result<TwoStepFit> {
    let k = fpca.num_components();
    if tables.len() != k {
        return Err(FdaError::InvalidArgument(format!(
            "{} score regressions for {k} components",
            tables.len()
        )));
    }
    let mean: Vec<f64> = grid.iter().map(|&t| fpca.mean_at(t)).collect::<Result<_>>()?;
    let phi: Vec<Vec<f64>> = grid.iter().map(|&t| fpca.eigenfunctions_at(t)).collect::<Result<_>>()?;
    let names: Vec<String> = tables
        .first()
        .map(|t| t.terms.iter().skip(1).map(|e| e.term.clone()).collect())
        .unwrap_or_default();
    let curve = |term: usize| -> Vec<f64> {
        phi.iter()
            .map(|ph| (0..k).map(|c| tables[c].terms[term].estimate * ph[c]).sum())
            .collect()
    };
    let intercept: Vec<f64> = if k == 0 {
        mean.clone()
    } else {
        mean.iter().zip(curve(0)).map(|(m, c)| m + c).collect()
    };
    let induced = names
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), curve(j + 1)))
        .collect();
    Ok(TwoStepFit {
        grid: grid.to_vec(),
        score_regressions: tables.to_vec(),
        induced_intercept: intercept,
        induced_coefficients: induced,
        num_components: k,
    })
}

/// Covariate matrix from named sample covariates, rows in sample order.
pub fn covariate_matrix(samples: &[FunctionalSample], names: &[String]) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(samples.len(), names.len());
    for (i, s) in samples.iter().enumerate() {
        for (j, n) in names.iter().enumerate() {
            x[(i, j)] = s.covariate(n)?;
        }
    }
    Ok(x)
}

/// FPCA on `grid`, score regressions on `covariates`, induced curves on `grid`.
pub fn fit_two_step(
    samples: &[FunctionalSample],
    covariates: &[String],
    fpca_config: &FpcaConfig,
    grid: &[f64],
) -> Result<(TwoStepFit, FpcaResult)> {
    let fp = fpca::fit_fpca(samples, grid, fpca_config)?;
    let x = covariate_matrix(samples, covariates)?;
    let tables = regress_scores(&fp, &x, covariates)?;
    Ok((induce_functional_coefficients(&tables, &fp, grid)?, fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, linspace};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_fpca(scores: DMatrix<f64>, phi: DMatrix<f64>, grid: Vec<f64>) -> FpcaResult {
        let k = scores.ncols();
        FpcaResult {
            mean: vec![0.5; grid.len()],
            grid,
            eigenfunctions: phi,
            eigenvalues: vec![1.0; k],
            subject_ids: (0..scores.nrows()).map(|i| format!("s{i}")).collect(),
            scores,
            noise_variance: 0.0,
            pve: vec![1.0; k],
        }
    }

    #[test]
    fn holm_examples() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03]).unwrap();
        assert!((adj[0] - 0.03).abs() < 1e-15);
        assert!((adj[1] - 0.06).abs() < 1e-15);
        assert!((adj[2] - 0.06).abs() < 1e-15);
        assert_eq!(holm_adjust(&[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(holm_adjust(&[0.2]).unwrap(), vec![0.2]);
        assert!(holm_adjust(&[1.2]).is_err());
    }

    proptest! {
        #[test]
        fn holm_dominates_and_permutes(p in prop::collection::vec(0.0f64..=1.0, 1..12), seed in 0u64..1000) {
            let adj = holm_adjust(&p).unwrap();
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(a >= r && *a <= 1.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..p.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let adj_p = holm_adjust(&pp).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((adj_p[j] - adj[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_linear_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-1.0..1.0));
        let scores = DMatrix::from_fn(30, 1, |i, _| 0.3 + 2.5 * x[(i, 0)]);
        let grid = linspace(0.0, 1.0, 5);
        let fp = fake_fpca(scores, DMatrix::from_element(5, 1, 1.0), grid);
        let t = regress_scores(&fp, &x, &["a".into(), "b".into()]).unwrap();
        assert!((t[0].estimate("a").unwrap() - 2.5).abs() < 1e-10);
        assert!(t[0].estimate("b").unwrap().abs() < 1e-10);
        assert!(t[0].terms[1].p_value < 1e-12);
    }

    #[test]
    fn collinear_columns_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(20, 3, |i, j| if j == 2 { 0.0 } else { rng.random_range(-1.0..1.0) + i as f64 * 0.0 });
        let mut x2 = x.clone();
        for i in 0..20 {
            x2[(i, 2)] = x[(i, 0)] - 2.0 * x[(i, 1)];
        }
        let fp = fake_fpca(DMatrix::from_element(20, 1, 1.0), DMatrix::from_element(3, 1, 1.0), linspace(0.0, 1.0, 3));
        match regress_scores(&fp, &x2, &["a".into(), "b".into(), "c".into()]) {
            Err(FdaError::Input(msg)) => assert!(msg.contains("'c'") && msg.contains("a") && msg.contains("b"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn induced_constant_and_zero() {
        let grid = linspace(0.0, 4.0, 9);
        let c = 0.5;
        let fp = fake_fpca(DMatrix::zeros(5, 1), DMatrix::from_element(9, 1, c), grid.clone());
        let table = ScoreRegression {
            component: 1,
            terms: vec![
                TermEstimate { term: INTERCEPT.into(), estimate: 0.0, std_error: 0.0, p_value: 1.0, adj_p_value: None },
                TermEstimate { term: "m".into(), estimate: 2.0, std_error: 0.0, p_value: 1.0, adj_p_value: Some(1.0) },
            ],
            residual_variance: 0.0,
        };
        let fit = induce_functional_coefficients(&[table.clone()], &fp, &grid).unwrap();
        assert!(fit.coefficient("m").unwrap().iter().all(|&v| (v - 2.0 * c).abs() < 1e-15));
        assert_eq!(fit.induced_intercept, fp.mean);
        let mut zero = table;
        zero.terms[1].estimate = 0.0;
        let fit = induce_functional_coefficients(&[zero], &fp, &grid).unwrap();
        assert!(fit.coefficient("m").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn induced_matches_matrix_product_and_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = linspace(0.0, 1.0, 21);
        let w = linalg::trapezoid_weights(&grid);
        let mut phi = DMatrix::zeros(21, 2);
        for j in 0..21 {
            phi[(j, 0)] = 1.0;
            phi[(j, 1)] = 3f64.sqrt() * (2.0 * grid[j] - 1.0);
        }
        let gammas: Vec<[f64; 3]> = (0..2)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let tables: Vec<ScoreRegression> = gammas
            .iter()
            .enumerate()
            .map(|(k, g)| ScoreRegression {
                component: k + 1,
                terms: ["intercept", "a", "b"]
                    .iter()
                    .zip(g)
                    .map(|(n, &e)| TermEstimate { term: n.to_string(), estimate: e, std_error: 1.0, p_value: 1.0, adj_p_value: None })
                    .collect(),
                residual_variance: 1.0,
            })
            .collect();
        let fp = fake_fpca(DMatrix::zeros(4, 2), phi.clone(), grid.clone());
        let fit = induce_functional_coefficients(&tables, &fp, &grid).unwrap();
        let gmat = DMatrix::from_fn(2, 2, |k, m| gammas[k][m + 1]);
        let oracle = &phi * gmat;
        for (m, (_, curve)) in fit.induced_coefficients.iter().enumerate() {
            for j in 0..21 {
                assert!((curve[j] - oracle[(j, m)]).abs() < 1e-12);
            }
            // residual after projecting on the eigenfunction span
            let wm = DMatrix::from_diagonal(&DVector::from_column_slice(&w));
            let gram = phi.transpose() * &wm * &phi;
            let c = gram.try_inverse().unwrap() * phi.transpose() * &wm * DVector::from_column_slice(curve);
            let r = DVector::from_column_slice(curve) - &phi * c;
            let norm: f64 = (0..21).map(|j| w[j] * r[j] * r[j]).sum::<f64>().sqrt();
            assert!(norm <= 1e-10);
        }
    }

    #[test]
    fn adding_a_component_adds_its_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = linspace(1.0, 24.0, 24);
        let samples: Vec<FunctionalSample> = (0..50)
            .map(|i| {
                let x: f64 = rng.random_range(0.0..1.0);
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-0.5..0.5);
                let v = grid.iter().map(|t| 7.0 + x * 0.2 + a + b * (t - 12.5) / 7.0 + rng.random_range(-0.05..0.05)).collect();
                FunctionalSample::new(format!("s{i}"), grid.clone(), v).unwrap().with_covariate("x", x)
            })
            .collect();
        let cfg = FpcaConfig { num_components: Some(3), ..Default::default() };
        let (full, fp) = fit_two_step(&samples, &["x".into()], &cfg, &grid).unwrap();
        let fp2 = fp.truncate(2);
        let x = covariate_matrix(&samples, &["x".into()]).unwrap();
        let t2 = regress_scores(&fp2, &x, &["x".into()]).unwrap();
        let small = induce_functional_coefficients(&t2, &fp2, &grid).unwrap();
        let g3 = full.score_regressions[2].estimate("x").unwrap();
        for j in 0..24 {
            let diff = full.coefficient("x").unwrap()[j] - small.coefficient("x").unwrap()[j];
            assert!((diff - g3 * fp.eigenfunctions[(j, 2)]).abs() < 1e-12);
        }
    }
}
