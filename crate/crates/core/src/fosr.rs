//! Function-on-scalar regression with penalized spline coefficients and
//! subject-level functional random effects in an FPCA basis.

use std::io::Write;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::BasisSystem;
use crate::error::{FdaError, Result};
use crate::fpca::{self, FpcaConfig, FpcaResult};
use crate::linalg;
use crate::pls::{Criterion, LambdaSelection, MixedDesign, PenalizedProblem, PenaltyTerm, SubjectBlock};
use crate::sample::FunctionalSample;

pub const INTERCEPT: &str = "intercept";

/// Minimum observations per subject in the period.
pub const DEFAULT_MIN_OBS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FosrSpec {
    /// Covariates with time-varying effects; the intercept is implicit.
    pub varying_covariates: Vec<String>,
    pub invariant_covariates: Vec<String>,
    pub basis: BasisSystem,
    /// Eigenfunctions used for the subject effect; `None` takes every
    /// component retained by the FPCA.
    #[serde(default)]
    pub num_random_components: Option<usize>,
    #[serde(default)]
    pub selection: LambdaSelection,
    #[serde(default = "default_min_obs")]
    pub min_obs: usize,
}

fn default_min_obs() -> usize {
    DEFAULT_MIN_OBS
}

impl FosrSpec {
    pub fn new(basis: BasisSystem) -> Self {
        FosrSpec {
            varying_covariates: vec![],
            invariant_covariates: vec![],
            basis,
            num_random_components: None,
            selection: LambdaSelection::default(),
            min_obs: DEFAULT_MIN_OBS,
        }
    }

    /// Intercept followed by the varying covariates.
    pub fn term_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.varying_covariates.iter().cloned())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&String> = self
            .varying_covariates
            .iter()
            .chain(&self.invariant_covariates)
            .collect();
        if names.iter().any(|n| n.as_str() == INTERCEPT) {
            return Err(FdaError::InvalidArgument(format!(
                "'{INTERCEPT}' is implicit and cannot be listed as a covariate"
            )));
        }
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(FdaError::InvalidArgument(format!(
                "covariate '{}' listed more than once (varying and invariant lists must be disjoint)",
                w[0]
            )));
        }
        if let LambdaSelection::Search { grid, .. } = &self.selection {
            if grid.is_empty() {
                return Err(FdaError::InvalidArgument("lambda grid is empty".into()));
            }
        }
        Ok(())
    }

    fn num_fixed(&self) -> usize {
        self.basis.num_basis() * (1 + self.varying_covariates.len()) + self.invariant_covariates.len()
    }
}

/// Long-format design with its subject bookkeeping.
#[derive(Debug, Clone)]
pub struct LongDesign {
    pub design: MixedDesign,
    pub subject_ids: Vec<String>,
    pub excluded_subjects: Vec<String>,
    pub times: Vec<Vec<f64>>,
    pub random_effect_variances: Vec<f64>,
    pub noise_variance: f64,
}

impl LongDesign {
    pub fn num_rows(&self) -> usize {
        self.design.n_obs()
    }
}

/// One row of covariates times basis values per observed (subject, time).
/// Subjects below `min_obs` are excluded with a warning.
pub fn assemble_long_design(
    samples: &[FunctionalSample],
    spec: &FosrSpec,
    fpca: Option<&FpcaResult>,
) -> Result<LongDesign> {
    spec.validate()?;
    let k = match (spec.num_random_components, fpca) {
        (Some(0), _) | (None, None) => 0,
        (Some(k), Some(f)) => {
            if k > f.num_components() {
                return Err(FdaError::InvalidArgument(format!(
                    "{k} random components requested but the FPCA has {}",
                    f.num_components()
                )));
            }
            k
        }
        (None, Some(f)) => f.num_components(),
        (Some(k), None) => {
            return Err(FdaError::InvalidArgument(format!(
                "{k} random components requested without an FPCA fit"
            )))
        }
    };
    let l = spec.basis.num_basis();
    let q = spec.varying_covariates.len();
    let p = spec.num_fixed();
    let (ridge, variances, noise) = match fpca {
        Some(f) if k > 0 => {
            let top = f.eigenvalues[0].max(f64::MIN_POSITIVE);
            let sigma2 = f.noise_variance.max(1e-8 * top);
            let lam: Vec<f64> = f.eigenvalues[..k].iter().map(|&v| v.max(1e-12 * top)).collect();
            (lam.iter().map(|v| sigma2 / v).collect(), lam, sigma2)
        }
        Some(f) => (vec![], vec![], f.noise_variance),
        None => (vec![], vec![], 0.0),
    };
    let mut subjects = Vec::new();
    let mut ids = Vec::new();
    let mut excluded = Vec::new();
    let mut times = Vec::new();
    for s in samples {
        if s.len() < spec.min_obs.max(1) {
            debug!(
                "subject '{}' excluded: {} observations, {} required",
                s.subject_id,
                s.len(),
                spec.min_obs
            );
            excluded.push(s.subject_id.clone());
            continue;
        }
        let varying: Vec<f64> = spec
            .varying_covariates
            .iter()
            .map(|c| s.covariate(c))
            .collect::<Result<_>>()?;
        let invariant: Vec<f64> = spec
            .invariant_covariates
            .iter()
            .map(|c| s.covariate(c))
            .collect::<Result<_>>()?;
        let ni = s.len();
        let mut x = DMatrix::zeros(ni, p);
        let mut phi = DMatrix::zeros(ni, k);
        for (r, &t) in s.times.iter().enumerate() {
            let (first, vals) = spec.basis.evaluate_local(t)?;
            for (j, v) in vals.iter().enumerate() {
                x[(r, first + j)] = *v;
                for (m, xm) in varying.iter().enumerate() {
                    x[(r, l * (m + 1) + first + j)] = xm * v;
                }
            }
            for (m, xm) in invariant.iter().enumerate() {
                x[(r, l * (q + 1) + m)] = *xm;
            }
            if k > 0 {
                let f = fpca.expect("k > 0 implies an FPCA fit").eigenfunctions_at(t)?;
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
        times.push(s.times.clone());
    }
    if subjects.is_empty() {
        return Err(FdaError::Input(format!(
            "no subject has at least {} observations",
            spec.min_obs
        )));
    }
    // bootstrap replicates carry relabeled ids and stay quiet
    if !excluded.is_empty() && !excluded.iter().any(|id| id.contains('#')) {
        warn!(
            "{} subject(s) excluded with fewer than {} observations",
            excluded.len(),
            spec.min_obs
        );
    }
    Ok(LongDesign {
        design: MixedDesign {
            subjects,
            ridge,
            num_fixed: p,
        },
        subject_ids: ids,
        excluded_subjects: excluded,
        times,
        random_effect_variances: variances,
        noise_variance: noise,
    })
}

/// Difference penalties, one per functional term.
pub fn functional_penalties(spec: &FosrSpec) -> Vec<PenaltyTerm> {
    let l = spec.basis.num_basis();
    let s = spec.basis.penalty().gram();
    spec.term_names()
        .into_iter()
        .enumerate()
        .map(|(m, name)| PenaltyTerm {
            name,
            columns: m * l..(m + 1) * l,
            matrix: s.clone(),
            block: m,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarCoefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FosrFit {
    pub terms: Vec<String>,
    pub basis: BasisSystem,
    /// `L × (Q+1)`, intercept first.
    pub functional_coefficients: DMatrix<f64>,
    pub scalar_coefficients: Vec<ScalarCoefficient>,
    pub lambdas: Vec<f64>,
    pub lambda_at_boundary: Vec<bool>,
    pub criterion: Option<Criterion>,
    pub random_effect_variances: Vec<f64>,
    pub residual_variance: f64,
    pub effective_df: Vec<f64>,
    pub subject_ids: Vec<String>,
    /// `n × K` predicted subject scores.
    pub subject_effects: DMatrix<f64>,
    pub excluded_subjects: Vec<String>,
    pub num_observations: usize,
    /// Per-subject residual means: conditional on the subject effect, then without it.
    pub residual_means: Vec<(f64, f64)>,
}

/// Fits the model with random-effect ridge weights taken from `fpca`.
pub fn fit_fosr(samples: &[FunctionalSample], spec: &FosrSpec, fpca: Option<&FpcaResult>) -> Result<FosrFit> {
    let long = assemble_long_design(samples, spec, fpca)?;
    let system = long.design.gls_system()?;
    let penalties = functional_penalties(spec);
    let problem = PenalizedProblem::new(&system, &penalties)?;
    let pls = problem.fit(&spec.selection)?;

    let l = spec.basis.num_basis();
    let nterms = spec.term_names().len();
    let functional = DMatrix::from_column_slice(l, nterms, &pls.beta.as_slice()[..l * nterms]);
    let sigma2 = pls.scale.max(f64::MIN_POSITIVE);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let scalar = spec
        .invariant_covariates
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let c = l * nterms + m;
            let est = pls.beta[c];
            let se = (sigma2 * pls.inverse[(c, c)]).max(0.0).sqrt();
            let p = if se > 0.0 {
                2.0 * (1.0 - normal.cdf((est / se).abs()))
            } else if est == 0.0 {
                1.0
            } else {
                0.0
            };
            ScalarCoefficient {
                name: name.clone(),
                estimate: est,
                std_error: se,
                p_value: p,
            }
        })
        .collect();

    let effects = long.design.subject_effects(&pls.beta)?;
    let k = long.design.num_random();
    let mut subject_effects = DMatrix::zeros(effects.len(), k);
    for (i, z) in effects.iter().enumerate() {
        for c in 0..k {
            subject_effects[(i, c)] = z[c];
        }
    }
    let residual_means = long
        .design
        .subjects
        .iter()
        .zip(&effects)
        .map(|(s, z)| {
            let fixed = &s.y - &s.x * &pls.beta;
            let full = if k > 0 { &fixed - &s.phi * z } else { fixed.clone() };
            (full.mean(), fixed.mean())
        })
        .collect();

    Ok(FosrFit {
        terms: spec.term_names(),
        basis: spec.basis.clone(),
        functional_coefficients: functional,
        scalar_coefficients: scalar,
        lambdas: pls.lambdas.clone(),
        lambda_at_boundary: pls.boundary.clone(),
        criterion: pls.criterion,
        random_effect_variances: long.random_effect_variances.clone(),
        residual_variance: sigma2,
        effective_df: pls.edf_blocks.clone(),
        subject_ids: long.subject_ids.clone(),
        subject_effects,
        excluded_subjects: long.excluded_subjects.clone(),
        num_observations: system.n_obs,
        residual_means,
    })
}

/// FPCA on the samples (restricted to the basis domain) followed by [`fit_fosr`].
pub fn fit_fosr_with_fpca(
    samples: &[FunctionalSample],
    spec: &FosrSpec,
    fpca_config: &FpcaConfig,
) -> Result<(FosrFit, Option<FpcaResult>)> {
    if spec.num_random_components == Some(0) {
        return Ok((fit_fosr(samples, spec, None)?, None));
    }
    let (lo, hi) = spec.basis.domain();
    let inside: Vec<FunctionalSample> = samples
        .iter()
        .map(|s| s.restrict(lo, hi))
        .filter(|s| !s.is_empty())
        .collect();
    let grid = fpca::default_grid(&inside);
    let mut cfg = fpca_config.clone();
    if let Some(k) = spec.num_random_components {
        cfg.num_components = Some(k);
    }
    let fp = fpca::fit_fpca(&inside, &grid, &cfg)?;
    let mut spec = spec.clone();
    if let Some(k) = spec.num_random_components {
        spec.num_random_components = Some(k.min(fp.num_components()));
    }
    let fit = fit_fosr(samples, &spec, Some(&fp))?;
    Ok((fit, Some(fp)))
}

impl FosrFit {
    pub fn term_index(&self, name: &str) -> Result<usize> {
        self.terms.iter().position(|t| t == name).ok_or_else(|| FdaError::Lookup {
            kind: "functional coefficient",
            name: name.to_string(),
        })
    }

    pub fn coefficient_vector(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.term_index(name)?;
        Ok(self.functional_coefficients.column(m).iter().copied().collect())
    }

    pub fn scalar(&self, name: &str) -> Result<&ScalarCoefficient> {
        self.scalar_coefficients
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| FdaError::Lookup {
                kind: "scalar coefficient",
                name: name.to_string(),
            })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let coefs: serde_json::Map<String, serde_json::Value> = self
            .terms
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let v: Vec<f64> = self.functional_coefficients.column(m).iter().copied().collect();
                (t.clone(), serde_json::json!(v))
            })
            .collect();
        serde_json::json!({
            "basis": self.basis,
            "functional_coefficients": coefs,
            "scalar_coefficients": self.scalar_coefficients,
            "lambdas": self.terms.iter().cloned().zip(self.lambdas.iter().copied()).collect::<std::collections::BTreeMap<_, _>>(),
            "lambda_at_boundary": self.lambda_at_boundary,
            "criterion": self.criterion,
            "random_effect_variances": self.random_effect_variances,
            "residual_variance": self.residual_variance,
            "effective_df": self.effective_df,
            "excluded_subjects": self.excluded_subjects,
            "num_subjects": self.subject_ids.len(),
            "num_observations": self.num_observations,
        })
    }

    /// `covariate,t,estimate` for every functional term.
    pub fn write_coefficients_csv<W: Write>(&self, grid: &[f64], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["covariate", "t", "estimate"])?;
        for t in &self.terms {
            let v = predict_coefficient(self, t, grid)?;
            for (x, e) in grid.iter().zip(v) {
                w.write_record([t.clone(), format!("{x}"), format!("{e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `Σ_l b_lm B_l(t)` on `grid`.
pub fn predict_coefficient(fit: &FosrFit, covariate: &str, grid: &[f64]) -> Result<Vec<f64>> {
    let coef = fit.coefficient_vector(covariate)?;
    fit.basis.evaluate_function(&coef, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResidual {
    pub subject_id: String,
    pub mean_with_random_effect: f64,
    pub mean_without_random_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub criterion: Option<Criterion>,
    pub terms: Vec<String>,
    pub lambdas: Vec<f64>,
    pub lambda_at_boundary: Vec<bool>,
    pub effective_df: Vec<f64>,
    pub excluded_subjects: Vec<String>,
    pub subject_residuals: Vec<SubjectResidual>,
    /// Across-subject SD of residual means with the subject effect.
    pub sd_with_random_effect: f64,
    pub sd_without_random_effect: f64,
}

/// Diagnostics: effective df per term and per-subject residual centring with
/// and without the predicted subject effect.
pub fn fit_report(fit: &FosrFit) -> FitReport {
    let with: Vec<f64> = fit.residual_means.iter().map(|r| r.0).collect();
    let without: Vec<f64> = fit.residual_means.iter().map(|r| r.1).collect();
    FitReport {
        criterion: fit.criterion,
        terms: fit.terms.clone(),
        lambdas: fit.lambdas.clone(),
        lambda_at_boundary: fit.lambda_at_boundary.clone(),
        effective_df: fit.effective_df.clone(),
        excluded_subjects: fit.excluded_subjects.clone(),
        subject_residuals: fit
            .subject_ids
            .iter()
            .zip(&fit.residual_means)
            .map(|(id, r)| SubjectResidual {
                subject_id: id.clone(),
                mean_with_random_effect: r.0,
                mean_without_random_effect: r.1,
            })
            .collect(),
        sd_with_random_effect: linalg::sample_sd(&with),
        sd_without_random_effect: linalg::sample_sd(&without),
    }
}
