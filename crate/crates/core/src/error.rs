use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The CLI maps these onto exit codes: numerical and inference failures
/// exit with 3, everything else with 2.
#[derive(Error, Debug)]
pub enum FdaError {
    #[error("value {value} lies outside the domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("unknown {kind} '{name}'")]
    Lookup { kind: &'static str, name: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("inference failure: {0}")]
    Inference(String),

    #[error(
        "standard error is degenerate at every point of '{term}'; \
         drop the term or inspect the replicates (degenerate points are excluded from the max statistic)"
    )]
    DegenerateSe { term: String },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("join error: subjects without covariates: {}", .0.join(", "))]
    Join(Vec<String>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FdaError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FdaError::Numerical(_) | FdaError::Inference(_) | FdaError::DegenerateSe { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FdaError>;
