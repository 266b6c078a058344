//! The irregularly observed curve of one subject.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};

/// One subject's trajectory with its baseline information.
///
/// Missing weeks are simply absent from `times`; there are no sentinel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Numeric covariates after reference coding.
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    #[serde(default)]
    pub arm: String,
    /// Baseline-step stratum used by the stratified bootstrap.
    #[serde(default)]
    pub stratum: Option<String>,
    /// Cohort label for arms randomized in cohorts.
    #[serde(default)]
    pub cohort: Option<String>,
}

impl FunctionalSample {
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = FunctionalSample {
            subject_id: subject_id.into(),
            times,
            values,
            covariates: BTreeMap::new(),
            arm: String::new(),
            stratum: None,
            cohort: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_arm(mut self, arm: impl Into<String>) -> Self {
        self.arm = arm.into();
        self
    }

    pub fn with_covariate(mut self, name: impl Into<String>, value: f64) -> Self {
        self.covariates.insert(name.into(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(FdaError::Input(format!(
                "subject '{}': {} times but {} values",
                self.subject_id,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(FdaError::Input(format!(
                "subject '{}': observation times must be strictly increasing",
                self.subject_id
            )));
        }
        if self.values.iter().chain(&self.times).any(|v| !v.is_finite()) {
            return Err(FdaError::Input(format!(
                "subject '{}': non-finite time or value",
                self.subject_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Named covariate, with a lookup error naming the subject.
    pub fn covariate(&self, name: &str) -> Result<f64> {
        self.covariates.get(name).copied().ok_or_else(|| FdaError::Lookup {
            kind: "covariate",
            name: format!("{name} (subject {})", self.subject_id),
        })
    }

    /// Observations restricted to `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> FunctionalSample {
        let mut out = self.clone();
        let keep: Vec<usize> = (0..self.times.len())
            .filter(|&j| self.times[j] >= lo && self.times[j] <= hi)
            .collect();
        out.times = keep.iter().map(|&j| self.times[j]).collect();
        out.values = keep.iter().map(|&j| self.values[j]).collect();
        out
    }
}
