//! Function-on-function regression: follow-up curves on the (imputed)
//! intervention curve through arm-specific tensor-product surfaces.

use std::io::Write;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{kron, BasisSystem};
use crate::error::{FdaError, Result};
use crate::fosr::{ScalarCoefficient, DEFAULT_MIN_OBS, INTERCEPT};
use crate::fpca::{self, FpcaConfig, FpcaResult};
use crate::linalg;
use crate::pls::{Criterion, LambdaSelection, MixedDesign, PenalizedProblem, PenaltyTerm, SubjectBlock};
use crate::sample::FunctionalSample;

pub const DEFAULT_NUM_BASIS_SURFACE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FofrSpec {
    /// Marginal basis over the predictor period.
    pub basis_t: BasisSystem,
    /// Marginal basis over the response period; also used for μ(u) and β_m(u).
    pub basis_u: BasisSystem,
    /// Arms with their own surface, matched against `FunctionalSample::arm`.
    pub arms: Vec<String>,
    #[serde(default)]
    pub varying_covariates: Vec<String>,
    #[serde(default)]
    pub invariant_covariates: Vec<String>,
    /// Adds an indicator per non-reference arm as a scalar shift.
    #[serde(default = "default_true")]
    pub arm_main_effects: bool,
    #[serde(default = "default_reference")]
    pub reference_arm: String,
    #[serde(default)]
    pub num_random_components: Option<usize>,
    #[serde(default)]
    pub selection: LambdaSelection,
    #[serde(default = "default_min_obs")]
    pub min_obs: usize,
}

fn default_true() -> bool {
    true
}

fn default_reference() -> String {
    "control".into()
}

fn default_min_obs() -> usize {
    DEFAULT_MIN_OBS
}

impl FofrSpec {
    pub fn new(basis_t: BasisSystem, basis_u: BasisSystem, arms: Vec<String>) -> Self {
        FofrSpec {
            basis_t,
            basis_u,
            arms,
            varying_covariates: vec![],
            invariant_covariates: vec![],
            arm_main_effects: true,
            reference_arm: default_reference(),
            num_random_components: None,
            selection: LambdaSelection::default(),
            min_obs: DEFAULT_MIN_OBS,
        }
    }

    fn arm_indicator_names(&self) -> Vec<String> {
        if !self.arm_main_effects {
            return vec![];
        }
        self.arms
            .iter()
            .filter(|a| **a != self.reference_arm)
            .map(|a| format!("arm_{a}"))
            .collect()
    }

    fn scalar_names(&self) -> Vec<String> {
        self.invariant_covariates
            .iter()
            .cloned()
            .chain(self.arm_indicator_names())
            .collect()
    }

    fn layout(&self) -> Layout {
        let k2 = self.basis_u.num_basis();
        let k1 = self.basis_t.num_basis();
        let q = self.varying_covariates.len();
        let surf0 = k2 * (1 + q);
        let scal0 = surf0 + k1 * k2 * self.arms.len();
        Layout {
            k1,
            k2,
            surf0,
            scal0,
            p: scal0 + self.scalar_names().len(),
        }
    }
}

struct Layout {
    k1: usize,
    k2: usize,
    surf0: usize,
    scal0: usize,
    p: usize,
}

/// Imputed predictor curves on a quadrature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalPredictor {
    pub subject_ids: Vec<String>,
    pub grid: Vec<f64>,
    /// `n × |grid|`, no missing entries.
    pub values: DMatrix<f64>,
}

impl FunctionalPredictor {
    fn row(&self, id: &str) -> Option<usize> {
        self.subject_ids.iter().position(|s| s == id)
    }
}

/// `Σ_j w_j W_i(t_j) B_k1(t_j)` for every subject: an `n × K₁` matrix.
pub fn predictor_integrals(w: &DMatrix<f64>, grid: &[f64], basis_t: &BasisSystem) -> Result<DMatrix<f64>> {
    if w.ncols() != grid.len() {
        return Err(FdaError::InvalidArgument(format!(
            "predictor has {} columns for a {}-point grid",
            w.ncols(),
            grid.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(FdaError::Precondition(
            "functional predictor has missing entries; impute it first".into(),
        ));
    }
    let weights = linalg::trapezoid_weights(grid);
    let mut bt = basis_t.evaluate(grid)?;
    for (j, wj) in weights.iter().enumerate() {
        bt.row_mut(j).scale_mut(*wj);
    }
    Ok(w * bt)
}

/// Tensor columns of one subject at response time `u`, row-major over
/// `(k1, k2)`: `integral[k1] · B_k2(u)`.
pub fn functional_covariate_columns(integrals: &[f64], basis_u: &BasisSystem, u: f64) -> Result<Vec<f64>> {
    let bu = basis_u.evaluate_point(u)?;
    let k2 = bu.len();
    let mut out = vec![0.0; integrals.len() * k2];
    for (a, ia) in integrals.iter().enumerate() {
        for (b, vb) in bu.iter().enumerate() {
            out[a * k2 + b] = ia * vb;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FofrFit {
    pub arms: Vec<String>,
    pub basis_t: BasisSystem,
    pub basis_u: BasisSystem,
    /// `K₁ × K₂` coefficient array per arm.
    pub surfaces: Vec<DMatrix<f64>>,
    pub quadrature_grid: Vec<f64>,
    pub quadrature_weights: Vec<f64>,
    /// Intercept then each varying covariate, `K₂` coefficients each.
    pub varying_terms: Vec<String>,
    pub varying_coefficients: Vec<Vec<f64>>,
    pub scalar_coefficients: Vec<ScalarCoefficient>,
    pub lambda_names: Vec<String>,
    pub lambdas: Vec<f64>,
    pub lambda_at_boundary: Vec<bool>,
    pub criterion: Option<Criterion>,
    pub effective_df: Vec<f64>,
    pub residual_variance: f64,
    pub subject_effect_variances: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub excluded_subjects: Vec<String>,
}

impl FofrFit {
    pub fn arm_index(&self, arm: &str) -> Result<usize> {
        self.arms.iter().position(|a| a == arm).ok_or_else(|| FdaError::Lookup {
            kind: "arm",
            name: arm.to_string(),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let surfaces: serde_json::Map<String, serde_json::Value> = self
            .arms
            .iter()
            .zip(&self.surfaces)
            .map(|(a, s)| {
                let rows: Vec<Vec<f64>> = (0..s.nrows()).map(|r| s.row(r).iter().copied().collect()).collect();
                (a.clone(), serde_json::json!(rows))
            })
            .collect();
        let varying: serde_json::Map<String, serde_json::Value> = self
            .varying_terms
            .iter()
            .zip(&self.varying_coefficients)
            .map(|(n, c)| (n.clone(), serde_json::json!(c)))
            .collect();
        serde_json::json!({
            "basis_t": self.basis_t,
            "basis_u": self.basis_u,
            "surfaces": surfaces,
            "quadrature": {"rule": "trapezoid", "grid": self.quadrature_grid, "weights": self.quadrature_weights},
            "varying_coefficients": varying,
            "scalar_coefficients": self.scalar_coefficients,
            "lambdas": self.lambda_names.iter().cloned().zip(self.lambdas.iter().copied()).collect::<std::collections::BTreeMap<_, _>>(),
            "lambda_at_boundary": self.lambda_at_boundary,
            "criterion": self.criterion,
            "effective_df": self.effective_df,
            "residual_variance": self.residual_variance,
            "subject_effect_variances": self.subject_effect_variances,
            "num_subjects": self.subject_ids.len(),
            "excluded_subjects": self.excluded_subjects,
        })
    }

    /// `arm,t,u,estimate` on the product grid.
    pub fn write_surfaces_csv<W: Write>(&self, t: &[f64], u: &[f64], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arm", "t", "u", "estimate"])?;
        for arm in &self.arms {
            let s = evaluate_surface(self, arm, t, u)?;
            for (i, ti) in t.iter().enumerate() {
                for (j, uj) in u.iter().enumerate() {
                    w.write_record([arm.clone(), format!("{ti}"), format!("{uj}"), format!("{}", s[(i, j)])])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `β_p(t_i, u_j)` on the product grid.
pub fn evaluate_surface(fit: &FofrFit, arm: &str, t: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
    let p = fit.arm_index(arm)?;
    surface_values(&fit.surfaces[p], &fit.basis_t, &fit.basis_u, t, u)
}

pub fn surface_values(
    coef: &DMatrix<f64>,
    basis_t: &BasisSystem,
    basis_u: &BasisSystem,
    t: &[f64],
    u: &[f64],
) -> Result<DMatrix<f64>> {
    let bt = basis_t.evaluate(t)?;
    let bu = basis_u.evaluate(u)?;
    Ok(bt * coef * bu.transpose())
}

/// `β_p(t, u)` over `t` at one fixed `u`.
pub fn cross_section(fit: &FofrFit, arm: &str, t: &[f64], u: f64) -> Result<Vec<f64>> {
    Ok(evaluate_surface(fit, arm, t, &[u])?.column(0).iter().copied().collect())
}

fn assemble(
    samples: &[FunctionalSample],
    predictor: &FunctionalPredictor,
    spec: &FofrSpec,
    fpca: Option<&FpcaResult>,
) -> Result<(MixedDesign, Vec<String>, Vec<String>, Vec<f64>)> {
    let lay = spec.layout();
    let k = match (spec.num_random_components, fpca) {
        (Some(0), _) | (None, None) => 0,
        (Some(k), Some(f)) if k <= f.num_components() => k,
        (Some(k), _) => {
            return Err(FdaError::InvalidArgument(format!(
                "{k} random components requested but only {} available",
                fpca.map_or(0, |f| f.num_components())
            )))
        }
        (None, Some(f)) => f.num_components(),
    };
    let (ridge, variances) = match fpca {
        Some(f) if k > 0 => {
            let top = f.eigenvalues[0].max(f64::MIN_POSITIVE);
            let sigma2 = f.noise_variance.max(1e-8 * top);
            let lam: Vec<f64> = f.eigenvalues[..k].iter().map(|&v| v.max(1e-12 * top)).collect();
            (lam.iter().map(|v| sigma2 / v).collect(), lam)
        }
        _ => (vec![], vec![]),
    };
    let integrals = predictor_integrals(&predictor.values, &predictor.grid, &spec.basis_t)?;
    let arm_ind = spec.arm_indicator_names();
    let mut subjects = Vec::new();
    let mut ids = Vec::new();
    let mut excluded = Vec::new();
    for s in samples {
        if s.len() < spec.min_obs.max(1) {
            debug!("subject '{}' excluded: {} follow-up observations", s.subject_id, s.len());
            excluded.push(s.subject_id.clone());
            continue;
        }
        let Some(row) = predictor.row(&s.subject_id) else {
            return Err(FdaError::Input(format!(
                "subject '{}' has no functional predictor",
                s.subject_id
            )));
        };
        let arm = spec.arms.iter().position(|a| *a == s.arm).ok_or_else(|| FdaError::Lookup {
            kind: "arm",
            name: format!("{} (subject {})", s.arm, s.subject_id),
        })?;
        let varying: Vec<f64> = spec.varying_covariates.iter().map(|c| s.covariate(c)).collect::<Result<_>>()?;
        let mut scalars: Vec<f64> = spec.invariant_covariates.iter().map(|c| s.covariate(c)).collect::<Result<_>>()?;
        scalars.extend(arm_ind.iter().map(|n| if *n == format!("arm_{}", s.arm) { 1.0 } else { 0.0 }));
        let int_i: Vec<f64> = integrals.row(row).iter().copied().collect();
        let ni = s.len();
        let mut x = DMatrix::zeros(ni, lay.p);
        let mut phi = DMatrix::zeros(ni, k);
        for (r, &u) in s.times.iter().enumerate() {
            let (first, vals) = spec.basis_u.evaluate_local(u)?;
            for (j, v) in vals.iter().enumerate() {
                x[(r, first + j)] = *v;
                for (m, xm) in varying.iter().enumerate() {
                    x[(r, lay.k2 * (m + 1) + first + j)] = xm * v;
                }
            }
            let cols = functional_covariate_columns(&int_i, &spec.basis_u, u)?;
            let c0 = lay.surf0 + arm * lay.k1 * lay.k2;
            for (c, v) in cols.iter().enumerate() {
                x[(r, c0 + c)] = *v;
            }
            for (m, v) in scalars.iter().enumerate() {
                x[(r, lay.scal0 + m)] = *v;
            }
            if k > 0 {
                let f = fpca.expect("k > 0").eigenfunctions_at(u)?;
                for c in 0..k {
                    phi[(r, c)] = f[c];
                }
            }
        }
        subjects.push(SubjectBlock {
            x,
            y: DVector::from_column_slice(&s.values),
            phi,
        });
        ids.push(s.subject_id.clone());
    }
    if subjects.is_empty() {
        return Err(FdaError::Input(format!(
            "no subject has at least {} follow-up observations",
            spec.min_obs
        )));
    }
    Ok((
        MixedDesign {
            subjects,
            ridge,
            num_fixed: lay.p,
        },
        ids,
        excluded,
        variances,
    ))
}

fn penalties(spec: &FofrSpec) -> Vec<PenaltyTerm> {
    let lay = spec.layout();
    let su = spec.basis_u.penalty().gram();
    let st = spec.basis_t.penalty().gram();
    let mut out = Vec::new();
    let names = std::iter::once(INTERCEPT.to_string()).chain(spec.varying_covariates.iter().cloned());
    for (m, name) in names.enumerate() {
        out.push(PenaltyTerm {
            name,
            columns: m * lay.k2..(m + 1) * lay.k2,
            matrix: su.clone(),
            block: m,
        });
    }
    let nb = 1 + spec.varying_covariates.len();
    let it = DMatrix::identity(lay.k1, lay.k1);
    let iu = DMatrix::identity(lay.k2, lay.k2);
    let pt = kron(&st, &iu);
    let pu = kron(&it, &su);
    for (a, arm) in spec.arms.iter().enumerate() {
        let c0 = lay.surf0 + a * lay.k1 * lay.k2;
        let cols = c0..c0 + lay.k1 * lay.k2;
        out.push(PenaltyTerm {
            name: format!("surface_{arm}_t"),
            columns: cols.clone(),
            matrix: pt.clone(),
            block: nb + a,
        });
        out.push(PenaltyTerm {
            name: format!("surface_{arm}_u"),
            columns: cols,
            matrix: pu.clone(),
            block: nb + a,
        });
    }
    out
}

/// Penalized fit of follow-up curves on the imputed predictor.
pub fn fit_fofr(
    samples: &[FunctionalSample],
    predictor: &FunctionalPredictor,
    spec: &FofrSpec,
    fpca_follow_up: Option<&FpcaResult>,
) -> Result<FofrFit> {
    if spec.arms.is_empty() {
        return Err(FdaError::InvalidArgument("at least one arm is required".into()));
    }
    let lay = spec.layout();
    let (design, ids, excluded, variances) = assemble(samples, predictor, spec, fpca_follow_up)?;
    if !excluded.is_empty() && !excluded.iter().any(|id| id.contains('#')) {
        warn!("{} subject(s) excluded with fewer than {} follow-up observations", excluded.len(), spec.min_obs);
    }
    let system = design.gls_system()?;
    let pens = penalties(spec);
    let problem = PenalizedProblem::new(&system, &pens)?;
    let pls = problem.fit(&spec.selection)?;
    let beta = &pls.beta;
    let nv = 1 + spec.varying_covariates.len();
    let varying_coefficients = (0..nv)
        .map(|m| beta.rows(m * lay.k2, lay.k2).iter().copied().collect())
        .collect();
    let surfaces = (0..spec.arms.len())
        .map(|a| {
            let c0 = lay.surf0 + a * lay.k1 * lay.k2;
            DMatrix::from_row_slice(lay.k1, lay.k2, &beta.as_slice()[c0..c0 + lay.k1 * lay.k2])
        })
        .collect();
    let sigma2 = pls.scale.max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let scalar_coefficients = spec
        .scalar_names()
        .into_iter()
        .enumerate()
        .map(|(m, name)| {
            let c = lay.scal0 + m;
            let se = (sigma2 * pls.inverse[(c, c)]).max(0.0).sqrt();
            let est = beta[c];
            let p_value = if se > 0.0 {
                2.0 * (1.0 - normal.cdf((est / se).abs()))
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            ScalarCoefficient {
                name,
                estimate: est,
                std_error: se,
                p_value,
            }
        })
        .collect();
    Ok(FofrFit {
        arms: spec.arms.clone(),
        basis_t: spec.basis_t.clone(),
        basis_u: spec.basis_u.clone(),
        surfaces,
        quadrature_weights: linalg::trapezoid_weights(&predictor.grid),
        quadrature_grid: predictor.grid.clone(),
        varying_terms: std::iter::once(INTERCEPT.to_string())
            .chain(spec.varying_covariates.iter().cloned())
            .collect(),
        varying_coefficients,
        scalar_coefficients,
        lambda_names: pens.iter().map(|p| p.name.clone()).collect(),
        lambdas: pls.lambdas.clone(),
        lambda_at_boundary: pls.boundary.clone(),
        criterion: pls.criterion,
        effective_df: pls.edf_blocks.clone(),
        residual_variance: sigma2,
        subject_effect_variances: variances,
        subject_ids: ids,
        excluded_subjects: excluded,
    })
}

/// Integer-week quadrature grid over a basis domain.
pub fn weekly_grid(basis: &BasisSystem) -> Vec<f64> {
    let (lo, hi) = basis.domain();
    let a = lo.ceil() as i64;
    let b = hi.floor() as i64;
    (a..=b).map(|v| v as f64).collect()
}

/// Imputes the predictor period by FPCA on `predictor_samples`, fits FPCA on
/// the response period for the subject effect, then [`fit_fofr`]. Subjects
/// lacking predictor-period data are dropped with a warning.
pub fn fit_fofr_with_fpca(
    predictor_samples: &[FunctionalSample],
    response_samples: &[FunctionalSample],
    spec: &FofrSpec,
    fpca_config: &FpcaConfig,
) -> Result<FofrFit> {
    let (tlo, thi) = spec.basis_t.domain();
    let w_samples: Vec<FunctionalSample> = predictor_samples
        .iter()
        .map(|s| s.restrict(tlo, thi))
        .filter(|s| !s.is_empty())
        .collect();
    let grid = weekly_grid(&spec.basis_t);
    let fp_w = fpca::fit_fpca(&w_samples, &grid, fpca_config)?;
    let have: std::collections::HashSet<&str> = w_samples.iter().map(|s| s.subject_id.as_str()).collect();
    let (ulo, uhi) = spec.basis_u.domain();
    let mut responses = Vec::new();
    for s in response_samples {
        if have.contains(s.subject_id.as_str()) {
            let r = s.restrict(ulo, uhi);
            if !r.is_empty() {
                responses.push(r);
            }
        } else {
            warn!("subject '{}' dropped: no predictor-period observations", s.subject_id);
        }
    }
    let resp_ids: std::collections::HashSet<&str> = responses.iter().map(|s| s.subject_id.as_str()).collect();
    let w_used: Vec<FunctionalSample> = w_samples
        .iter()
        .filter(|s| resp_ids.contains(s.subject_id.as_str()))
        .cloned()
        .collect();
    let values = fpca::impute_curves(&fp_w, &w_used, &grid)?;
    let predictor = FunctionalPredictor {
        subject_ids: w_used.iter().map(|s| s.subject_id.clone()).collect(),
        grid,
        values,
    };
    let fp_u = if spec.num_random_components == Some(0) {
        None
    } else {
        let ugrid = fpca::default_grid(&responses);
        let mut cfg = fpca_config.clone();
        if let Some(k) = spec.num_random_components {
            cfg.num_components = Some(k);
        }
        Some(fpca::fit_fpca(&responses, &ugrid, &cfg)?)
    };
    let mut spec = spec.clone();
    if let (Some(k), Some(f)) = (spec.num_random_components, fp_u.as_ref()) {
        spec.num_random_components = Some(k.min(f.num_components()));
    }
    fit_fofr(&responses, &predictor, &spec, fp_u.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::linspace;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn indicator_integrals_are_span_widths() {
        let bt = BasisSystem::new(0.0, 4.0, 4, 0, 1).unwrap();
        let grid = linspace(0.0, 4.0, 41);
        let w = DMatrix::from_element(1, 41, 1.0);
        let ints = predictor_integrals(&w, &grid, &bt).unwrap();
        // trapezoid on a step function splits the shared endpoint weight
        for k in 0..4 {
            assert!((ints[(0, k)] - 1.0).abs() < 0.051, "{}", ints[(0, k)]);
        }
        assert!((ints.row(0).sum() - 4.0).abs() < 1e-12);
        let zero = DMatrix::zeros(1, 41);
        assert!(predictor_integrals(&zero, &grid, &bt).unwrap().iter().all(|&v| v == 0.0));
        let mut nan = w.clone();
        nan[(0, 3)] = f64::NAN;
        assert!(matches!(predictor_integrals(&nan, &grid, &bt), Err(FdaError::Precondition(_))));
    }

    #[test]
    fn constant_surface_contribution() {
        let bt = BasisSystem::cubic(1.0, 24.0, 8).unwrap();
        let bu = BasisSystem::cubic(25.0, 36.0, 6).unwrap();
        let grid: Vec<f64> = (1..=24).map(|v| v as f64).collect();
        let wvals: Vec<f64> = grid.iter().map(|t| 7.0 + (t / 5.0).sin()).collect();
        let w = DMatrix::from_row_slice(1, 24, &wvals);
        let ints = predictor_integrals(&w, &grid, &bt).unwrap();
        let c = 0.37;
        for u in [25.0, 29.5, 36.0] {
            let cols = functional_covariate_columns(&ints.row(0).iter().copied().collect::<Vec<_>>(), &bu, u).unwrap();
            let contrib: f64 = cols.iter().map(|v| v * c).sum();
            let oracle = c * linalg::trapezoid(&grid, &wvals);
            assert!((contrib - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn surface_evaluation_oracles() {
        let bt = BasisSystem::cubic(1.0, 24.0, 8).unwrap();
        let bu = BasisSystem::cubic(25.0, 36.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coef = DVector::from_vec(v.clone()) * DVector::from_vec(wv.clone()).transpose();
        let t = linspace(1.0, 24.0, 11);
        let u = linspace(25.0, 36.0, 7);
        let s = surface_values(&coef, &bt, &bu, &t, &u).unwrap();
        let ft = bt.evaluate_function(&v, &t).unwrap();
        let fu = bu.evaluate_function(&wv, &u).unwrap();
        for i in 0..11 {
            for j in 0..7 {
                assert!((s[(i, j)] - ft[i] * fu[j]).abs() < 1e-12);
            }
        }
        let zero = surface_values(&DMatrix::zeros(8, 6), &bt, &bu, &t, &u).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    fn synthetic(n: usize, seed: u64, truth: impl Fn(f64, f64) -> f64) -> (Vec<FunctionalSample>, FunctionalPredictor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tg: Vec<f64> = (1..=24).map(|v| v as f64).collect();
        let ug: Vec<f64> = (25..=36).map(|v| v as f64).collect();
        let tw = linalg::trapezoid_weights(&tg);
        let mut w = DMatrix::zeros(n, 24);
        let mut samples = Vec::new();
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            for j in 0..24 {
                w[(i, j)] = a + b * (tg[j] - 12.5) / 12.0;
            }
            let y: Vec<f64> = ug
                .iter()
                .map(|&u| {
                    let f: f64 = (0..24).map(|j| tw[j] * w[(i, j)] * truth(tg[j], u)).sum();
                    7.0 + f + rng.random_range(-0.05..0.05)
                })
                .collect();
            samples.push(FunctionalSample::new(format!("s{i}"), ug.clone(), y).unwrap().with_arm("a"));
        }
        let pred = FunctionalPredictor {
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            grid: tg,
            values: w,
        };
        (samples, pred)
    }

    #[test]
    fn huge_lambdas_give_bilinear_surface() {
        let (s, pred) = synthetic(40, 3, |t, u| 0.01 * (t / 6.0).sin() * (u - 30.0));
        let bt = BasisSystem::cubic(1.0, 24.0, 6).unwrap();
        let bu = BasisSystem::cubic(25.0, 36.0, 5).unwrap();
        let mut spec = FofrSpec::new(bt, bu, vec!["a".into()]);
        spec.arm_main_effects = false;
        spec.selection = LambdaSelection::Fixed(vec![1e-3, 1e12, 1e12]);
        let fit = fit_fofr(&s, &pred, &spec, None).unwrap();
        let t = linspace(1.0, 24.0, 9);
        let u = linspace(25.0, 36.0, 7);
        let v = evaluate_surface(&fit, "a", &t, &u).unwrap();
        // bilinear: f(t,u) = a + b t + c u + d t u; check second differences vanish
        let scale = v.amax().max(1e-3);
        for i in 1..8 {
            for j in 0..7 {
                let d2 = v[(i - 1, j)] - 2.0 * v[(i, j)] + v[(i + 1, j)];
                assert!(d2.abs() < 1e-4 * scale.max(1.0), "{d2}");
            }
        }
        for i in 0..9 {
            for j in 1..6 {
                let d2 = v[(i, j - 1)] - 2.0 * v[(i, j)] + v[(i, j + 1)];
                assert!(d2.abs() < 1e-4 * scale.max(1.0), "{d2}");
            }
        }
        let cs = cross_section(&fit, "a", &t, 26.0).unwrap();
        let full = evaluate_surface(&fit, "a", &t, &[26.0]).unwrap();
        for i in 0..9 {
            assert_eq!(cs[i], full[(i, 0)]);
        }
        assert!(matches!(evaluate_surface(&fit, "zzz", &t, &u), Err(FdaError::Lookup { .. })));
    }

    #[test]
    fn recovers_smooth_surface() {
        let truth = |t: f64, u: f64| 0.02 * (1.0 + (t - 12.5) / 12.0) * (1.0 - (u - 25.0) / 22.0);
        let (s, pred) = synthetic(150, 4, truth);
        let bt = BasisSystem::cubic(1.0, 24.0, 6).unwrap();
        let bu = BasisSystem::cubic(25.0, 36.0, 5).unwrap();
        let mut spec = FofrSpec::new(bt, bu, vec!["a".into()]);
        spec.arm_main_effects = false;
        spec.selection = LambdaSelection::Search {
            grid: linalg::log_grid(1e-4, 1e6, 11),
            criterion: Criterion::Gcv,
        };
        let fit = fit_fofr(&s, &pred, &spec, None).unwrap();
        let t = linspace(1.0, 24.0, 24);
        let u = linspace(25.0, 36.0, 12);
        let est = evaluate_surface(&fit, "a", &t, &u).unwrap();
        let (wt, wu) = (linalg::trapezoid_weights(&t), linalg::trapezoid_weights(&u));
        let mut err = 0.0;
        let mut tot = 0.0;
        for i in 0..24 {
            for j in 0..12 {
                let tr = truth(t[i], u[j]);
                err += wt[i] * wu[j] * (est[(i, j)] - tr).powi(2);
                tot += wt[i] * wu[j] * tr * tr;
            }
        }
        assert!(err <= 0.05 * tot, "{err} vs {tot}");
    }

    #[test]
    fn prediction_is_linear_in_predictor() {
        let bt = BasisSystem::cubic(1.0, 24.0, 8).unwrap();
        let grid: Vec<f64> = (1..=24).map(|v| v as f64).collect();
        let w = DMatrix::from_fn(1, 24, |_, j| (j as f64 / 3.0).cos());
        let a = predictor_integrals(&w, &grid, &bt).unwrap();
        let b = predictor_integrals(&(&w * 2.5), &grid, &bt).unwrap();
        for k in 0..8 {
            assert!((b[(0, k)] - 2.5 * a[(0, k)]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_refinement_is_second_order() {
        let bt = BasisSystem::cubic(0.0, 1.0, 6).unwrap();
        let f = |t: f64| (3.0 * t).sin() + 1.0;
        let col = |n: usize| {
            let g = linspace(0.0, 1.0, n);
            let w = DMatrix::from_fn(1, n, |_, j| f(g[j]));
            predictor_integrals(&w, &g, &bt).unwrap()
        };
        let fine = col(2049);
        let e1 = (col(33) - &fine).amax();
        let e2 = (col(65) - &fine).amax();
        assert!(e2 < e1 / 3.0, "{e1} {e2}");
    }
}
