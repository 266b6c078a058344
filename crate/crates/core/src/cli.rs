//! Command-line front end: one JSON config with per-module sections, flags
//! overriding its leaf keys, every run written to its own directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, DEFAULT_NUM_BASIS_FOLLOW_UP, DEFAULT_NUM_BASIS_INTERVENTION};
use crate::data_io::{self, Aggregate, CovariateSchema, CovariateTable, Period, PreprocessConfig};
use crate::error::{FdaError, Result};
use crate::fofr::{self, FofrSpec, DEFAULT_NUM_BASIS_SURFACE};
use crate::fosr::{self, FosrSpec, DEFAULT_MIN_OBS};
use crate::fpca::{self, FpcaConfig};
use crate::inference::{self, BootstrapConfig, BootstrapResult, Resampling, DEFAULT_REPLICATES};
use crate::pls::{default_lambda_grid, Criterion, LambdaSelection};
use crate::sample::FunctionalSample;
use crate::sim::{self, BenchmarkConfig, SimTruth};
use crate::twostep;

/// Environment variable read for the default thread count.
pub const THREADS_ENV: &str = "FUNREG_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Daily CSV `subject_id,day_index,steps`.
    pub daily: Option<PathBuf>,
    /// Long CSV `subject_id,week,value`.
    pub long: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// SimTruth JSON; `default` and `curvature` name the shipped truths.
    pub truth: Option<String>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            daily: None,
            long: None,
            covariates: None,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// Marginal size for curves; defaults depend on the period.
    pub num_basis: Option<usize>,
    pub degree: usize,
    pub penalty_order: usize,
    pub num_basis_surface: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            num_basis: None,
            degree: 3,
            penalty_order: 2,
            num_basis_surface: DEFAULT_NUM_BASIS_SURFACE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriterionArg {
    #[default]
    Gcv,
    Reml,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Gcv => Criterion::Gcv,
            CriterionArg::Reml => Criterion::Reml,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FosrConfig {
    /// Time-varying covariates; defaults to the arm indicators.
    pub varying: Option<Vec<String>>,
    /// Scalar covariates; defaults to every other coded covariate.
    pub invariant: Option<Vec<String>>,
    pub min_obs: usize,
    pub num_random_components: Option<usize>,
    pub criterion: CriterionArg,
    pub lambda_grid: Vec<f64>,
    /// Bootstrap replicates for bands; 0 skips inference.
    pub bootstrap: usize,
}

impl Default for FosrConfig {
    fn default() -> Self {
        FosrConfig {
            varying: None,
            invariant: None,
            min_obs: DEFAULT_MIN_OBS,
            num_random_components: None,
            criterion: CriterionArg::Gcv,
            lambda_grid: default_lambda_grid(),
            bootstrap: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FofrConfig {
    pub predictor_period: Period,
    pub response_period: Period,
    pub varying: Vec<String>,
    /// Scalar covariates; defaults to every coded covariate except the arm indicators.
    pub invariant: Option<Vec<String>>,
    pub arm_main_effects: bool,
    pub min_obs: usize,
    pub num_random_components: Option<usize>,
    pub criterion: CriterionArg,
    pub lambda_grid: Vec<f64>,
    pub bootstrap: usize,
}

impl Default for FofrConfig {
    fn default() -> Self {
        FofrConfig {
            predictor_period: Period::Intervention,
            response_period: Period::FollowUp,
            varying: vec![],
            invariant: None,
            arm_main_effects: true,
            min_obs: DEFAULT_MIN_OBS,
            num_random_components: None,
            criterion: CriterionArg::Gcv,
            lambda_grid: default_lambda_grid(),
            bootstrap: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStepConfig {
    /// Score-regression covariates; defaults to every coded covariate.
    pub covariates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub resampling: Resampling,
    /// `"a-b"` pairs of term names.
    pub contrasts: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            replicates: DEFAULT_REPLICATES,
            alpha: 0.05,
            resampling: Resampling::Plain,
            contrasts: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Subjects generated by `simulate`.
    pub n: usize,
    pub benchmark: BenchmarkConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 250,
            benchmark: BenchmarkConfig::default(),
        }
    }
}

/// Everything a run depends on. Thread count is excluded: it never changes
/// results and is reported in the run log instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub covariates: CovariateSchema,
    pub basis: BasisConfig,
    pub fpca: FpcaConfig,
    pub fosr: FosrConfig,
    pub fofr: FofrConfig,
    pub twostep: TwoStepConfig,
    pub inference: InferenceConfig,
    pub sim: SimConfig,
}

#[derive(Debug, Parser)]
#[command(name = "funreg", version, about = "Functional regression for longitudinal trajectories")]
pub struct Cli {
    /// JSON config with per-module sections; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root under which the run directory is created.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (affects wall time only).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    #[arg(long)]
    pub daily: Option<PathBuf>,
    #[arg(long)]
    pub long: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub period: Option<Period>,
    #[arg(long)]
    pub min_valid_steps: Option<f64>,
    #[arg(long)]
    pub min_days: Option<u32>,
    #[arg(long)]
    pub no_log: bool,
    #[arg(long)]
    pub aggregate: Option<AggregateArg>,
    #[arg(long)]
    pub impute_before_average: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregateArg {
    Daily,
    Weekly,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ModelArg {
    Fosr,
    Fofr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ResamplingArg {
    Plain,
    Stratified,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub min_obs: Option<usize>,
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub criterion: Option<CriterionArg>,
    /// Comma-separated time-varying covariates.
    #[arg(long, value_delimiter = ',')]
    pub varying: Option<Vec<String>>,
    /// Comma-separated scalar covariates.
    #[arg(long, value_delimiter = ',')]
    pub invariant: Option<Vec<String>>,
}

#[derive(Debug, Args, Default)]
pub struct BootArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub resampling: Option<ResamplingArg>,
    /// Resampling group size in non-cohort arms of the stratified scheme.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Contrast `a-b` of two terms; repeatable.
    #[arg(long)]
    pub contrast: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Daily records to weekly (or daily) analysis curves.
    Preprocess {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Functional principal components with missing data.
    Fpca {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        pve: Option<f64>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Function-on-scalar regression.
    Fosr {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Bootstrap replicates for joint bands (300 when given without a value).
        #[arg(long, num_args = 0..=1, default_missing_value = "300")]
        bootstrap: Option<usize>,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Function-on-function regression of the response period on the predictor period.
    Fofr {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        num_basis_surface: Option<usize>,
        #[arg(long, num_args = 0..=1, default_missing_value = "300")]
        bootstrap: Option<usize>,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// FPCA followed by score regressions.
    Twostep {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        covariates_used: Option<Vec<String>>,
    },
    /// Bootstrap bands for a FoSR or FoFR fit.
    Bootstrap {
        #[arg(long, value_enum, default_value = "fosr")]
        model: ModelArg,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        model_args: ModelArgs,
        #[arg(long)]
        replicates: Option<usize>,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// Generate one synthetic dataset.
    Simulate {
        /// `default`, `curvature` or a SimTruth JSON path.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// ISE comparison of FoSR and the two-step model on synthetic data.
    Benchmark {
        #[arg(long)]
        truth: Option<String>,
        /// Comma-separated sample sizes.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Preprocess { .. } => "preprocess",
            Command::Fpca { .. } => "fpca",
            Command::Fosr { .. } => "fosr",
            Command::Fofr { .. } => "fofr",
            Command::Twostep { .. } => "twostep",
            Command::Bootstrap { .. } => "bootstrap",
            Command::Simulate { .. } => "simulate",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

fn apply_input(cfg: &mut RunConfig, a: &InputArgs) {
    if let Some(p) = &a.daily {
        cfg.paths.daily = Some(p.clone());
    }
    if let Some(p) = &a.long {
        cfg.paths.long = Some(p.clone());
    }
    if let Some(p) = &a.covariates {
        cfg.paths.covariates = Some(p.clone());
    }
    if let Some(p) = a.period {
        cfg.preprocess.period = p;
    }
    if let Some(v) = a.min_valid_steps {
        cfg.preprocess.min_valid_steps = v;
    }
    if let Some(v) = a.min_days {
        cfg.preprocess.min_days_per_week = v;
    }
    if a.no_log {
        cfg.preprocess.log_transform = false;
    }
    if let Some(v) = a.aggregate {
        cfg.preprocess.aggregate = match v {
            AggregateArg::Daily => Aggregate::Daily,
            AggregateArg::Weekly => Aggregate::Weekly,
        };
    }
    if a.impute_before_average {
        cfg.preprocess.impute_before_average = true;
    }
}

fn apply_boot(cfg: &mut RunConfig, b: &BootArgs) {
    if let Some(a) = b.alpha {
        cfg.inference.alpha = a;
    }
    match b.resampling {
        Some(ResamplingArg::Plain) => cfg.inference.resampling = Resampling::Plain,
        Some(ResamplingArg::Stratified) => {
            cfg.inference.resampling = Resampling::Stratified { group_size: b.group_size }
        }
        None => {
            if let (Some(g), Resampling::Stratified { group_size }) = (b.group_size, &mut cfg.inference.resampling) {
                *group_size = Some(g);
            }
        }
    }
    if !b.contrast.is_empty() {
        cfg.inference.contrasts = b.contrast.clone();
    }
}

fn apply_model_fosr(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(v) = m.min_obs {
        cfg.fosr.min_obs = v;
    }
    if let Some(v) = m.num_basis {
        cfg.basis.num_basis = Some(v);
    }
    if let Some(v) = m.components {
        cfg.fosr.num_random_components = Some(v);
    }
    if let Some(v) = m.criterion {
        cfg.fosr.criterion = v;
    }
    if let Some(v) = &m.varying {
        cfg.fosr.varying = Some(v.clone());
    }
    if let Some(v) = &m.invariant {
        cfg.fosr.invariant = Some(v.clone());
    }
}

fn apply_model_fofr(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(v) = m.min_obs {
        cfg.fofr.min_obs = v;
    }
    if let Some(v) = m.num_basis {
        cfg.basis.num_basis = Some(v);
    }
    if let Some(v) = m.components {
        cfg.fofr.num_random_components = Some(v);
    }
    if let Some(v) = m.criterion {
        cfg.fofr.criterion = v;
    }
    if let Some(v) = &m.varying {
        cfg.fofr.varying = v.clone();
    }
    if let Some(v) = &m.invariant {
        cfg.fofr.invariant = Some(v.clone());
    }
}

/// File config, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => {
            let f = File::open(p)
                .map_err(|e| FdaError::Input(format!("cannot open config {}: {e}", p.display())))?;
            serde_json::from_reader(std::io::BufReader::new(f))
                .map_err(|e| FdaError::Input(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    match &cli.command {
        Command::Preprocess { input } => apply_input(&mut cfg, input),
        Command::Fpca { input, pve, components } => {
            apply_input(&mut cfg, input);
            if let Some(v) = pve {
                cfg.fpca.pve_threshold = *v;
            }
            if let Some(v) = components {
                cfg.fpca.num_components = Some(*v);
            }
        }
        Command::Fosr { input, model, bootstrap, boot } => {
            apply_input(&mut cfg, input);
            apply_model_fosr(&mut cfg, model);
            if let Some(b) = bootstrap {
                cfg.fosr.bootstrap = *b;
            }
            apply_boot(&mut cfg, boot);
        }
        Command::Fofr {
            input,
            model,
            num_basis_surface,
            bootstrap,
            boot,
        } => {
            apply_input(&mut cfg, input);
            apply_model_fofr(&mut cfg, model);
            if let Some(v) = num_basis_surface {
                cfg.basis.num_basis_surface = *v;
            }
            if let Some(b) = bootstrap {
                cfg.fofr.bootstrap = *b;
            }
            apply_boot(&mut cfg, boot);
        }
        Command::Twostep {
            input,
            components,
            covariates_used,
        } => {
            apply_input(&mut cfg, input);
            if let Some(v) = components {
                cfg.fpca.num_components = Some(*v);
            }
            if let Some(v) = covariates_used {
                cfg.twostep.covariates = Some(v.clone());
            }
        }
        Command::Bootstrap {
            model,
            input,
            model_args,
            replicates,
            boot,
        } => {
            apply_input(&mut cfg, input);
            match model {
                ModelArg::Fosr => apply_model_fosr(&mut cfg, model_args),
                ModelArg::Fofr => apply_model_fofr(&mut cfg, model_args),
            }
            if let Some(r) = replicates {
                cfg.inference.replicates = *r;
            }
            apply_boot(&mut cfg, boot);
        }
        Command::Simulate { truth, n } => {
            if let Some(t) = truth {
                cfg.paths.truth = Some(t.clone());
            }
            if let Some(n) = n {
                cfg.sim.n = *n;
            }
        }
        Command::Benchmark { truth, n, replicates } => {
            if let Some(t) = truth {
                cfg.paths.truth = Some(t.clone());
            }
            if let Some(n) = n {
                cfg.sim.benchmark.sizes = n.clone();
            }
            if let Some(r) = replicates {
                cfg.sim.benchmark.replicates = *r;
            }
        }
    }
    cfg.sim.benchmark.seed = cfg.master_seed;
    cfg.preprocess.validate()?;
    if !(cfg.inference.alpha > 0.0 && cfg.inference.alpha < 1.0) {
        return Err(FdaError::InvalidArgument(format!("alpha {} not in (0, 1)", cfg.inference.alpha)));
    }
    Ok(cfg)
}

/// Output directory of one run.
struct RunDir {
    path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(root: &Path, seed: u64) -> Result<RunDir> {
        std::fs::create_dir_all(root)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3fZ");
        let base = format!("run-{stamp}-seed{seed}");
        let mut path = root.join(&base);
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{base}-{k}"));
            k += 1;
        }
        std::fs::create_dir(&path)?;
        Ok(RunDir { path, files: vec![] })
    }

    fn writer(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.path.join(name))?))
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, v)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn load_truth(spec: Option<&str>) -> Result<SimTruth> {
    match spec.unwrap_or("default") {
        "default" => Ok(sim::default_truth()),
        "curvature" => Ok(sim::curvature_truth()),
        p => SimTruth::read_json(Path::new(p)),
    }
}

fn load_table(cfg: &RunConfig) -> Result<Option<CovariateTable>> {
    cfg.paths
        .covariates
        .as_ref()
        .map(|p| data_io::load_covariates(p, &cfg.covariates))
        .transpose()
}

/// Analysis curves for `period`, from the long CSV or by preprocessing the daily CSV.
fn load_samples(cfg: &RunConfig, period: Period, table: Option<&CovariateTable>) -> Result<Vec<FunctionalSample>> {
    let samples = if let Some(p) = &cfg.paths.long {
        let [lo, hi] = period.domain();
        data_io::read_long_file(p)?
            .into_iter()
            .map(|s| s.restrict(lo, hi))
            .filter(|s| !s.is_empty())
            .collect()
    } else if let Some(p) = &cfg.paths.daily {
        let records = data_io::read_daily_file(p)?;
        let pc = PreprocessConfig {
            period,
            ..cfg.preprocess.clone()
        };
        data_io::preprocess(&records, &pc)?.0
    } else {
        return Err(FdaError::Input("no input data: pass --daily or --long (or set paths in the config)".into()));
    };
    if samples.is_empty() {
        return Err(FdaError::Input("no observations in the selected period".into()));
    }
    match table {
        Some(t) => data_io::join_covariates(&samples, t),
        None => Ok(samples),
    }
}

fn arm_indicators(table: Option<&CovariateTable>) -> Vec<String> {
    table
        .map(|t| t.arm_levels().into_iter().map(|l| format!("{}_{l}", t.schema.arm_column)).collect())
        .unwrap_or_default()
}

fn coded(table: Option<&CovariateTable>) -> Vec<String> {
    table.map(|t| t.coded_names()).unwrap_or_default()
}

fn period_basis(cfg: &RunConfig, period: Period) -> Result<BasisSystem> {
    let [lo, hi] = period.domain();
    let default = match period {
        Period::Intervention => DEFAULT_NUM_BASIS_INTERVENTION,
        Period::FollowUp => DEFAULT_NUM_BASIS_FOLLOW_UP,
    };
    BasisSystem::new(
        lo,
        hi,
        cfg.basis.num_basis.unwrap_or(default),
        cfg.basis.degree,
        cfg.basis.penalty_order,
    )
}

fn fosr_spec(cfg: &mut RunConfig, table: Option<&CovariateTable>) -> Result<FosrSpec> {
    let varying = cfg.fosr.varying.clone().unwrap_or_else(|| arm_indicators(table));
    let invariant = cfg.fosr.invariant.clone().unwrap_or_else(|| {
        coded(table).into_iter().filter(|c| !varying.contains(c)).collect()
    });
    cfg.fosr.varying = Some(varying.clone());
    cfg.fosr.invariant = Some(invariant.clone());
    let period = cfg.preprocess.period;
    cfg.basis.num_basis.get_or_insert(match period {
        Period::Intervention => DEFAULT_NUM_BASIS_INTERVENTION,
        Period::FollowUp => DEFAULT_NUM_BASIS_FOLLOW_UP,
    });
    let mut spec = FosrSpec::new(period_basis(cfg, period)?);
    spec.varying_covariates = varying;
    spec.invariant_covariates = invariant;
    spec.min_obs = cfg.fosr.min_obs;
    spec.num_random_components = cfg.fosr.num_random_components;
    spec.selection = LambdaSelection::Search {
        grid: cfg.fosr.lambda_grid.clone(),
        criterion: cfg.fosr.criterion.into(),
    };
    spec.validate()?;
    Ok(spec)
}

fn fofr_spec(cfg: &mut RunConfig, table: Option<&CovariateTable>, arms: Vec<String>) -> Result<FofrSpec> {
    let ind = arm_indicators(table);
    let invariant = cfg.fofr.invariant.clone().unwrap_or_else(|| {
        coded(table)
            .into_iter()
            .filter(|c| !ind.contains(c) && !cfg.fofr.varying.contains(c))
            .collect()
    });
    cfg.fofr.invariant = Some(invariant.clone());
    let [tlo, thi] = cfg.fofr.predictor_period.domain();
    let [ulo, uhi] = cfg.fofr.response_period.domain();
    let k = cfg.basis.num_basis_surface;
    let bt = BasisSystem::new(tlo, thi, k, cfg.basis.degree, cfg.basis.penalty_order)?;
    let bu = BasisSystem::new(ulo, uhi, k, cfg.basis.degree, cfg.basis.penalty_order)?;
    let mut spec = FofrSpec::new(bt, bu, arms);
    spec.varying_covariates = cfg.fofr.varying.clone();
    spec.invariant_covariates = invariant;
    spec.arm_main_effects = cfg.fofr.arm_main_effects;
    spec.reference_arm = cfg.covariates.reference_arm.clone();
    spec.min_obs = cfg.fofr.min_obs;
    spec.num_random_components = cfg.fofr.num_random_components;
    spec.selection = LambdaSelection::Search {
        grid: cfg.fofr.lambda_grid.clone(),
        criterion: cfg.fofr.criterion.into(),
    };
    Ok(spec)
}

fn boot_config(cfg: &RunConfig, replicates: usize) -> BootstrapConfig {
    BootstrapConfig {
        replicates,
        seed: cfg.master_seed,
        alpha: cfg.inference.alpha,
        resampling: cfg.inference.resampling.clone(),
    }
}

fn weekly(period: Period) -> Vec<f64> {
    let (a, b) = period.weeks();
    (a..=b).map(|v| v as f64).collect()
}

fn write_bootstrap(dir: &mut RunDir, cfg: &RunConfig, result: &BootstrapResult) -> Result<()> {
    let mut bands = result.bands.clone();
    for c in &cfg.inference.contrasts {
        let (a, b) = c
            .split_once('-')
            .filter(|(a, b)| !a.is_empty() && !b.is_empty())
            .ok_or_else(|| FdaError::InvalidArgument(format!("contrast '{c}' is not of the form a-b")))?;
        bands.push(result.contrast(a, b)?);
    }
    inference::write_bands_csv(&bands, dir.writer("bands.csv")?)?;
    for b in &bands {
        let safe: String = b.term.chars().map(|c| if c.is_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
        inference::write_bands_csv(std::slice::from_ref(b), dir.writer(&format!("band_{safe}.csv"))?)?;
    }
    let mut w = csv::Writer::from_writer(dir.writer("scalar_bootstrap.csv")?);
    w.write_record(["name", "estimate", "std_error", "ci_lo", "ci_hi", "p_value"])?;
    for s in &result.scalars {
        w.write_record([
            s.name.clone(),
            format!("{}", s.estimate),
            format!("{}", s.std_error),
            format!("{}", s.ci_lo),
            format!("{}", s.ci_hi),
            format!("{}", s.p_value),
        ])?;
    }
    w.flush()?;
    let mut summary = result.summary_json();
    let contrasts: serde_json::Map<String, serde_json::Value> = bands[result.bands.len()..]
        .iter()
        .map(|b| {
            (
                b.term.clone(),
                serde_json::json!({"global_p": b.stats.global_p, "cma_quantile": b.stats.cma_quantile}),
            )
        })
        .collect();
    summary["contrasts"] = serde_json::Value::Object(contrasts);
    dir.json("bootstrap_summary.json", &summary)
}

fn write_scalars(dir: &mut RunDir, scalars: &[fosr::ScalarCoefficient]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dir.writer("scalars.csv")?);
    w.write_record(["name", "estimate", "std_error", "p_value"])?;
    for s in scalars {
        w.write_record([
            s.name.clone(),
            format!("{}", s.estimate),
            format!("{}", s.std_error),
            format!("{}", s.p_value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_fosr(cfg: &mut RunConfig, dir: &mut RunDir, bootstrap_only: bool) -> Result<()> {
    let table = load_table(cfg)?;
    let samples = load_samples(cfg, cfg.preprocess.period, table.as_ref())?;
    let spec = fosr_spec(cfg, table.as_ref())?;
    let grid = weekly(cfg.preprocess.period);
    if !bootstrap_only {
        let (fit, _) = fosr::fit_fosr_with_fpca(&samples, &spec, &cfg.fpca)?;
        fit.write_coefficients_csv(&grid, dir.writer("coefficients.csv")?)?;
        write_scalars(dir, &fit.scalar_coefficients)?;
        dir.json("fit.json", &fit.to_json())?;
        dir.json("fit_report.json", &fosr::fit_report(&fit))?;
    }
    let b = if bootstrap_only { cfg.inference.replicates } else { cfg.fosr.bootstrap };
    if b > 0 {
        cfg.inference.replicates = b;
        let result = inference::bootstrap_fosr(&samples, &spec, &cfg.fpca, &grid, &boot_config(cfg, b))?;
        write_bootstrap(dir, cfg, &result)?;
    }
    Ok(())
}

fn run_fofr(cfg: &mut RunConfig, dir: &mut RunDir, bootstrap_only: bool) -> Result<()> {
    let table = load_table(cfg)?;
    let pred = load_samples(cfg, cfg.fofr.predictor_period, table.as_ref())?;
    let resp = load_samples(cfg, cfg.fofr.response_period, table.as_ref())?;
    let mut arms: Vec<String> = resp.iter().map(|s| s.arm.clone()).collect();
    arms.sort();
    arms.dedup();
    if arms.iter().any(|a| a.is_empty()) {
        return Err(FdaError::Input("every subject needs an arm label for FoFR (pass --covariates)".into()));
    }
    let spec = fofr_spec(cfg, table.as_ref(), arms)?;
    let t = weekly(cfg.fofr.predictor_period);
    let u = weekly(cfg.fofr.response_period);
    if !bootstrap_only {
        let fit = fofr::fit_fofr_with_fpca(&pred, &resp, &spec, &cfg.fpca)?;
        fit.write_surfaces_csv(&t, &u, dir.writer("surfaces.csv")?)?;
        dir.json("fit.json", &fit.to_json())?;
    }
    let b = if bootstrap_only { cfg.inference.replicates } else { cfg.fofr.bootstrap };
    if b > 0 {
        cfg.inference.replicates = b;
        let result = inference::bootstrap_fofr(&pred, &resp, &spec, &cfg.fpca, &t, &u, &boot_config(cfg, b))?;
        write_bootstrap(dir, cfg, &result)?;
    }
    Ok(())
}

fn run_command(command: &Command, cfg: &mut RunConfig, dir: &mut RunDir) -> Result<()> {
    match command {
        Command::Preprocess { .. } => {
            let path = cfg
                .paths
                .daily
                .clone()
                .ok_or_else(|| FdaError::Input("preprocess needs --daily".into()))?;
            let records = data_io::read_daily_file(&path)?;
            let (samples, report) = data_io::preprocess(&records, &cfg.preprocess)?;
            data_io::write_long_csv(&samples, dir.writer("long.csv")?)?;
            dir.json("report.json", &report)?;
        }
        Command::Fpca { .. } => {
            let samples = load_samples(cfg, cfg.preprocess.period, None)?;
            let grid = fpca::default_grid(&samples);
            let fit = fpca::fit_fpca(&samples, &grid, &cfg.fpca)?;
            dir.json("fpca.json", &fit.to_json())?;
            fit.write_scores_csv(dir.writer("scores.csv")?)?;
            let mut w = csv::Writer::from_writer(dir.writer("eigenfunctions.csv")?);
            let mut header = vec!["t".to_string(), "mean".to_string()];
            header.extend((1..=fit.num_components()).map(|k| format!("phi_{k}")));
            w.write_record(&header)?;
            for (j, t) in fit.grid.iter().enumerate() {
                let mut rec = vec![format!("{t}"), format!("{}", fit.mean[j])];
                rec.extend((0..fit.num_components()).map(|k| format!("{}", fit.eigenfunctions[(j, k)])));
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        Command::Fosr { .. } => run_fosr(cfg, dir, false)?,
        Command::Fofr { .. } => run_fofr(cfg, dir, false)?,
        Command::Bootstrap { model, .. } => match model {
            ModelArg::Fosr => run_fosr(cfg, dir, true)?,
            ModelArg::Fofr => run_fofr(cfg, dir, true)?,
        },
        Command::Twostep { .. } => {
            let table = load_table(cfg)?;
            let samples = load_samples(cfg, cfg.preprocess.period, table.as_ref())?;
            let covs = cfg.twostep.covariates.clone().unwrap_or_else(|| coded(table.as_ref()));
            cfg.twostep.covariates = Some(covs.clone());
            let grid = weekly(cfg.preprocess.period);
            let (fit, fp) = twostep::fit_two_step(&samples, &covs, &cfg.fpca, &grid)?;
            fit.write_tables_csv(dir.writer("score_tables.csv")?)?;
            fit.write_coefficients_csv(dir.writer("coefficients.csv")?)?;
            dir.json("fpca.json", &fp.to_json())?;
        }
        Command::Simulate { .. } => {
            let truth = load_truth(cfg.paths.truth.as_deref())?;
            let samples = sim::generate_dataset(&truth, cfg.sim.n, cfg.master_seed)?;
            dir.json("truth.json", &truth)?;
            sim::write_samples_csv(&samples, dir.writer("samples.csv")?)?;
            write_sim_covariates(&samples, &truth, &cfg.covariates, dir.writer("covariates.csv")?)?;
        }
        Command::Benchmark { .. } => {
            let truth = load_truth(cfg.paths.truth.as_deref())?;
            let result = sim::run_benchmark(&truth, &cfg.sim.benchmark)?;
            result.write_rows_csv(dir.writer("benchmark.csv")?)?;
            result.write_mean_curves_csv(dir.writer("mean_curves.csv")?)?;
            dir.json("summary.json", &result.summary_json())?;
        }
    }
    Ok(())
}

/// `subject_id,arm,stratum,<scalar covariates>` for generated samples, in
/// the layout `--covariates` expects.
fn write_sim_covariates<W: Write>(
    samples: &[FunctionalSample],
    truth: &SimTruth,
    schema: &CovariateSchema,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let scalars = truth.invariant_names();
    let mut header = vec!["subject_id".to_string(), schema.arm_column.clone(), schema.stratum_column.clone()];
    header.extend(scalars.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![s.subject_id.clone(), s.arm.clone(), s.stratum.clone().unwrap_or_default()];
        for c in &scalars {
            rec.push(format!("{}", s.covariate(c)?));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunLog<'a> {
    command: &'a str,
    seed: u64,
    version: &'a str,
    thread_count: usize,
    started_at: String,
    wall_time_seconds: f64,
    outputs: &'a [String],
    status: &'a str,
    error: Option<String>,
}

fn thread_count(cli: &Cli) -> usize {
    cli.threads
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let started = Instant::now();
    let started_at = chrono::Utc::now().to_rfc3339();
    let threads = thread_count(&cli);
    let outcome = (|| -> Result<RunDir> {
        let mut cfg = resolve_config(&cli)?;
        let root = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let mut dir = RunDir::create(&root, cfg.master_seed)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| FdaError::InvalidArgument(format!("thread pool: {e}")))?;
        let res = pool.install(|| run_command(&cli.command, &mut cfg, &mut dir));
        // the resolved config is written even when the command fails
        dir.json("resolved_config.json", &cfg)?;
        let log = RunLog {
            command: cli.command.name(),
            seed: cfg.master_seed,
            version: env!("CARGO_PKG_VERSION"),
            thread_count: threads,
            started_at: started_at.clone(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            outputs: &dir.files.clone(),
            status: if res.is_ok() { "ok" } else { "error" },
            error: res.as_ref().err().map(|e| e.to_string()),
        };
        dir.json("run_log.json", &log)?;
        res.map(|_| dir)
    })();
    match outcome {
        Ok(dir) => {
            info!("outputs written to {}", dir.path.display());
            println!("{}", dir.path.display());
            0
        }
        Err(e) => {
            let kind = if e.is_numerical() { "numerical" } else { "input" };
            eprintln!("{}", serde_json::json!({"error": kind, "message": e.to_string()}));
            exit_code(&e)
        }
    }
}

/// 3 for numerical failures, 2 otherwise.
pub fn exit_code(e: &FdaError) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}
