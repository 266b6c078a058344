//! Daily step records to weekly trajectories, covariate tables and the long CSV format.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{FdaError, Result};
use crate::fpca::{self, FpcaConfig};
use crate::sample::FunctionalSample;

/// Opens `path`, naming it in the error.
pub(crate) fn open_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| FdaError::Input(format!("cannot open {}: {e}", path.display())))
}

/// Last week kept by preprocessing.
pub const LAST_WEEK: i64 = 36;

/// One raw device day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyRecord {
    pub subject_id: String,
    /// 1-based day since the subject's own start.
    pub day_index: i64,
    pub steps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    #[default]
    Intervention,
    FollowUp,
}

impl Period {
    /// Inclusive week range.
    pub fn weeks(self) -> (i64, i64) {
        match self {
            Period::Intervention => (1, 24),
            Period::FollowUp => (25, 36),
        }
    }

    pub fn domain(self) -> [f64; 2] {
        let (a, b) = self.weeks();
        [a as f64, b as f64]
    }
}

impl std::str::FromStr for Period {
    type Err = FdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intervention" => Ok(Period::Intervention),
            "follow_up" | "follow-up" | "followup" => Ok(Period::FollowUp),
            _ => Err(FdaError::InvalidArgument(format!(
                "unknown period '{s}' (expected intervention or follow_up)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Daily,
    #[default]
    Weekly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub min_valid_steps: f64,
    pub min_days_per_week: u32,
    pub log_transform: bool,
    pub aggregate: Aggregate,
    /// Fill invalid days by FPCA imputation on the daily grid before averaging.
    pub impute_before_average: bool,
    pub period: Period,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_valid_steps: 1000.0,
            min_days_per_week: 3,
            log_transform: true,
            aggregate: Aggregate::Weekly,
            impute_before_average: false,
            period: Period::Intervention,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_days_per_week > 7 {
            return Err(FdaError::InvalidArgument(format!(
                "min_days_per_week {} not in [0, 7]",
                self.min_days_per_week
            )));
        }
        if !self.min_valid_steps.is_finite() {
            return Err(FdaError::InvalidArgument("min_valid_steps must be finite".into()));
        }
        Ok(())
    }
}

/// Drop counts per rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub records_in: usize,
    pub days_below_min_steps: usize,
    pub records_beyond_last_week: usize,
    pub records_outside_period: usize,
    pub weeks_below_min_days: usize,
    pub imputed_days: usize,
    pub subjects_in: usize,
    pub subjects_without_data: usize,
    pub subjects_out: usize,
    pub observations_out: usize,
}

fn week_of(day: i64) -> i64 {
    (day + 6).div_euclid(7)
}

fn check_records(records: &[DailyRecord]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.day_index < 1 {
            return Err(FdaError::Input(format!(
                "subject '{}': day index {} must be at least 1",
                r.subject_id, r.day_index
            )));
        }
        if !r.steps.is_finite() || r.steps < 0.0 {
            return Err(FdaError::Input(format!(
                "subject '{}' day {}: step count {} must be a non-negative number",
                r.subject_id, r.day_index, r.steps
            )));
        }
        if !seen.insert((r.subject_id.as_str(), r.day_index)) {
            return Err(FdaError::Input(format!(
                "duplicate record for subject '{}' day {}",
                r.subject_id, r.day_index
            )));
        }
    }
    Ok(())
}

/// Applies validity, weekly aggregation, missingness and log rules, then the period filter.
/// Subjects with no remaining observations are left out; output is sorted by subject id.
pub fn preprocess(
    records: &[DailyRecord],
    config: &PreprocessConfig,
) -> Result<(Vec<FunctionalSample>, PreprocessReport)> {
    config.validate()?;
    check_records(records)?;
    let mut report = PreprocessReport {
        records_in: records.len(),
        ..Default::default()
    };
    let (w_lo, w_hi) = config.period.weeks();
    // subject -> day -> steps, valid days in the period only
    let mut by_subject: BTreeMap<String, BTreeMap<i64, f64>> = BTreeMap::new();
    for r in records {
        by_subject.entry(r.subject_id.clone()).or_default();
        let week = week_of(r.day_index);
        if week > LAST_WEEK {
            report.records_beyond_last_week += 1;
            continue;
        }
        if week < w_lo || week > w_hi {
            report.records_outside_period += 1;
            continue;
        }
        if r.steps < config.min_valid_steps {
            report.days_below_min_steps += 1;
            continue;
        }
        by_subject
            .get_mut(&r.subject_id)
            .expect("inserted above")
            .insert(r.day_index, r.steps);
    }
    if report.records_beyond_last_week > 0 {
        info!(
            "dropped {} records beyond week {LAST_WEEK}",
            report.records_beyond_last_week
        );
    }
    report.subjects_in = by_subject.len();

    let transform = |v: f64| if config.log_transform { v.ln() } else { v };

    if config.impute_before_average && config.aggregate == Aggregate::Weekly {
        impute_daily(&mut by_subject, config, &mut report)?;
    }

    let mut out = Vec::new();
    for (id, days) in &by_subject {
        let (times, values): (Vec<f64>, Vec<f64>) = match config.aggregate {
            Aggregate::Daily => days.iter().map(|(&d, &s)| (d as f64, transform(s))).unzip(),
            Aggregate::Weekly => {
                let mut weeks: BTreeMap<i64, (f64, u32)> = BTreeMap::new();
                for (&d, &s) in days {
                    let e = weeks.entry(week_of(d)).or_insert((0.0, 0));
                    e.0 += s;
                    e.1 += 1;
                }
                let mut t = Vec::new();
                let mut v = Vec::new();
                // weeks with zero valid days are absent already; only count partial ones
                for (w, (sum, cnt)) in weeks {
                    if cnt >= config.min_days_per_week.max(1) {
                        t.push(w as f64);
                        v.push(transform(sum / cnt as f64));
                    } else {
                        report.weeks_below_min_days += 1;
                    }
                }
                (t, v)
            }
        };
        if times.is_empty() {
            report.subjects_without_data += 1;
            continue;
        }
        report.observations_out += times.len();
        out.push(FunctionalSample::new(id.clone(), times, values)?);
    }
    report.subjects_out = out.len();
    Ok((out, report))
}

/// Replaces the daily series by a complete one on the period's day grid,
/// observed valid days kept and the rest predicted from an FPCA fit on the
/// working (optionally log) scale.
fn impute_daily(
    by_subject: &mut BTreeMap<String, BTreeMap<i64, f64>>,
    config: &PreprocessConfig,
    report: &mut PreprocessReport,
) -> Result<()> {
    let (w_lo, w_hi) = config.period.weeks();
    let d_lo = (w_lo - 1) * 7 + 1;
    let d_hi = w_hi * 7;
    let grid: Vec<f64> = (d_lo..=d_hi).map(|d| d as f64).collect();
    let fwd = |v: f64| if config.log_transform { v.ln() } else { v };
    let back = |v: f64| if config.log_transform { v.exp() } else { v };
    let samples: Vec<FunctionalSample> = by_subject
        .iter()
        .filter(|(_, days)| !days.is_empty())
        .map(|(id, days)| {
            FunctionalSample::new(
                id.clone(),
                days.keys().map(|&d| d as f64).collect(),
                days.values().map(|&s| fwd(s)).collect(),
            )
        })
        .collect::<Result<_>>()?;
    if samples.len() < 2 {
        warn!("imputation skipped: fewer than two subjects with valid days");
        return Ok(());
    }
    let fit = fpca::fit_fpca(&samples, &grid, &FpcaConfig::default())?;
    let full = fpca::impute_curves(&fit, &samples, &grid)?;
    for (i, s) in samples.iter().enumerate() {
        let days = by_subject.get_mut(&s.subject_id).expect("present");
        for (j, &d) in grid.iter().enumerate() {
            let d = d as i64;
            if !days.contains_key(&d) {
                days.insert(d, back(full[(i, j)]));
                report.imputed_days += 1;
            }
        }
    }
    Ok(())
}

fn parse_f64(s: &str, row: usize, column: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| FdaError::Parse {
        row,
        column: column.to_string(),
        message: format!("'{s}' is not a number"),
    })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| FdaError::Lookup {
        kind: "column",
        name: name.to_string(),
    })
}

/// Reads `subject_id,day_index,steps`.
pub fn read_daily_csv<R: Read>(input: R) -> Result<Vec<DailyRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let ci = column_index(&headers, "subject_id")?;
    let cd = column_index(&headers, "day_index")?;
    let cs = column_index(&headers, "steps")?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let day = parse_f64(&rec[cd], row, "day_index")?;
        if day.fract() != 0.0 {
            return Err(FdaError::Parse {
                row,
                column: "day_index".into(),
                message: format!("'{}' is not an integer", &rec[cd]),
            });
        }
        out.push(DailyRecord {
            subject_id: rec[ci].trim().to_string(),
            day_index: day as i64,
            steps: parse_f64(&rec[cs], row, "steps")?,
        });
    }
    Ok(out)
}

pub fn read_daily_file(path: &Path) -> Result<Vec<DailyRecord>> {
    read_daily_csv(open_file(path)?)
}

/// Writes `subject_id,week,value` rows.
pub fn write_long_csv<W: Write>(samples: &[FunctionalSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "week", "value"])?;
    for s in samples {
        for (t, v) in s.times.iter().zip(&s.values) {
            w.write_record([s.subject_id.clone(), format!("{t}"), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the long format; rows of one subject may come in any order.
pub fn read_long_csv<R: Read>(input: R) -> Result<Vec<FunctionalSample>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let ci = column_index(&headers, "subject_id")?;
    let ct = column_index(&headers, "week")?;
    let cv = column_index(&headers, "value")?;
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let t = parse_f64(&rec[ct], row, "week")?;
        let v = parse_f64(&rec[cv], row, "value")?;
        by.entry(rec[ci].trim().to_string()).or_default().push((t, v));
    }
    by.into_iter()
        .map(|(id, mut obs)| {
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (t, v) = obs.into_iter().unzip();
            FunctionalSample::new(id, t, v)
        })
        .collect()
}

pub fn read_long_file(path: &Path) -> Result<Vec<FunctionalSample>> {
    read_long_csv(open_file(path)?)
}

/// Roles of the categorical columns in a covariate file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateSchema {
    pub arm_column: String,
    pub reference_arm: String,
    pub stratum_column: String,
    pub cohort_column: String,
    /// Other categorical columns; reference level is the first in sorted order.
    pub categorical: Vec<String>,
}

impl Default for CovariateSchema {
    fn default() -> Self {
        CovariateSchema {
            arm_column: "arm".into(),
            reference_arm: "control".into(),
            stratum_column: "stratum".into(),
            cohort_column: "cohort".into(),
            categorical: vec![],
        }
    }
}

/// A subject's raw covariate record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub numeric: BTreeMap<String, f64>,
    pub categorical: BTreeMap<String, String>,
}

/// Covariates keyed by subject, with the column order of the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub schema: CovariateSchema,
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, CovariateRow>,
}

impl CovariateTable {
    fn is_categorical(&self, col: &str) -> bool {
        is_categorical(&self.schema, col)
    }

    /// Sorted levels of a categorical column.
    pub fn levels(&self, col: &str) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .rows
            .values()
            .filter_map(|r| r.categorical.get(col))
            .filter(|v| !v.is_empty())
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Non-reference arm levels in sorted order.
    pub fn arm_levels(&self) -> Vec<String> {
        self.levels(&self.schema.arm_column)
            .into_iter()
            .filter(|l| *l != self.schema.reference_arm)
            .collect()
    }

    /// Names of the reference-coded numeric covariates, in file order.
    pub fn coded_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for col in &self.columns {
            if col == &self.schema.arm_column {
                out.extend(self.arm_levels().into_iter().map(|l| format!("{col}_{l}")));
            } else if self.schema.categorical.contains(col) {
                out.extend(self.levels(col).into_iter().skip(1).map(|l| format!("{col}_{l}")));
            } else if !self.is_categorical(col) {
                out.push(col.clone());
            }
        }
        out
    }

    /// Reference-coded covariates of one subject.
    pub fn coded_row(&self, id: &str) -> Result<BTreeMap<String, f64>> {
        let row = self.rows.get(id).ok_or_else(|| FdaError::Join(vec![id.to_string()]))?;
        let mut out = BTreeMap::new();
        for col in &self.columns {
            if col == &self.schema.arm_column {
                let v = row.categorical.get(col).cloned().unwrap_or_default();
                for l in self.arm_levels() {
                    out.insert(format!("{col}_{l}"), if v == l { 1.0 } else { 0.0 });
                }
            } else if self.schema.categorical.contains(col) {
                let v = row.categorical.get(col).cloned().unwrap_or_default();
                for l in self.levels(col).into_iter().skip(1) {
                    out.insert(format!("{col}_{l}"), if v == l { 1.0 } else { 0.0 });
                }
            } else if let Some(&x) = row.numeric.get(col) {
                out.insert(col.clone(), x);
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["subject_id".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in &self.rows {
            let mut rec = vec![id.clone()];
            for c in &self.columns {
                if let Some(v) = row.numeric.get(c) {
                    rec.push(format!("{v}"));
                } else {
                    rec.push(row.categorical.get(c).cloned().unwrap_or_default());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn is_categorical(schema: &CovariateSchema, col: &str) -> bool {
    col == schema.arm_column
        || col == schema.stratum_column
        || col == schema.cohort_column
        || schema.categorical.iter().any(|c| c == col)
}

/// Parses a covariate CSV keyed by `subject_id`. Every non-categorical column
/// must be numeric in every row.
pub fn read_covariates<R: Read>(input: R, schema: &CovariateSchema) -> Result<CovariateTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let ci = column_index(&headers, "subject_id")?;
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != ci)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut rows = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let id = rec[ci].trim().to_string();
        let mut numeric = BTreeMap::new();
        let mut categorical = BTreeMap::new();
        for (j, h) in headers.iter().enumerate() {
            if j == ci {
                continue;
            }
            let h = h.trim();
            let cell = rec.get(j).unwrap_or("").trim();
            if is_categorical(schema, h) {
                categorical.insert(h.to_string(), cell.to_string());
            } else {
                numeric.insert(h.to_string(), parse_f64(cell, row, h)?);
            }
        }
        if rows.insert(id.clone(), CovariateRow { numeric, categorical }).is_some() {
            return Err(FdaError::Input(format!("duplicate subject '{id}' in covariate file")));
        }
    }
    if rows.is_empty() {
        return Err(FdaError::Input("covariate file has no rows".into()));
    }
    Ok(CovariateTable {
        schema: schema.clone(),
        columns,
        rows,
    })
}

pub fn load_covariates(path: &Path, schema: &CovariateSchema) -> Result<CovariateTable> {
    read_covariates(open_file(path)?, schema)
}

/// Attaches coded covariates and labels; every sample must have a row.
pub fn join_covariates(samples: &[FunctionalSample], table: &CovariateTable) -> Result<Vec<FunctionalSample>> {
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !table.rows.contains_key(&s.subject_id))
        .map(|s| s.subject_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(FdaError::Join(missing));
    }
    let label = |row: &CovariateRow, col: &str| -> Option<String> {
        row.categorical.get(col).filter(|v| !v.is_empty()).cloned()
    };
    samples
        .iter()
        .map(|s| {
            let row = &table.rows[&s.subject_id];
            let mut out = s.clone();
            out.covariates = table.coded_row(&s.subject_id)?;
            out.arm = label(row, &table.schema.arm_column).unwrap_or_default();
            out.stratum = label(row, &table.schema.stratum_column);
            out.cohort = label(row, &table.schema.cohort_column);
            Ok(out)
        })
        .collect()
}

/// Aligns two sample lists by subject id, keeping subjects present in both
/// (order of `a`).
pub fn align_subjects(a: &[FunctionalSample], b: &[FunctionalSample]) -> (Vec<FunctionalSample>, Vec<FunctionalSample>) {
    let idx: HashMap<&str, &FunctionalSample> = b.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    a.iter()
        .filter_map(|s| idx.get(s.subject_id.as_str()).map(|t| (s.clone(), (*t).clone())))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, day: i64, steps: f64) -> DailyRecord {
        DailyRecord {
            subject_id: id.into(),
            day_index: day,
            steps,
        }
    }

    #[test]
    fn invalid_day_leaves_too_few_days() {
        let r = vec![rec("a", 1, 1200.0), rec("a", 2, 900.0), rec("a", 3, 1500.0)];
        let (s, report) = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert!(s.is_empty());
        assert_eq!(report.days_below_min_steps, 1);
        assert_eq!(report.weeks_below_min_days, 1);
    }

    #[test]
    fn log_of_weekly_mean() {
        let r = vec![rec("a", 8, 2000.0), rec("a", 10, 3000.0), rec("a", 14, 4000.0)];
        let (s, _) = preprocess(&r, &PreprocessConfig::default()).unwrap();
        assert_eq!(s[0].times, vec![2.0]);
        assert_eq!(s[0].values, vec![3000f64.ln()]);
    }

    #[test]
    fn one_day_threshold_keeps_sparse_weeks() {
        let r = vec![rec("a", 1, 1200.0), rec("a", 2, 900.0), rec("a", 3, 1500.0)];
        let cfg = PreprocessConfig {
            min_days_per_week: 1,
            log_transform: false,
            ..Default::default()
        };
        let (s, _) = preprocess(&r, &cfg).unwrap();
        assert_eq!(s[0].values, vec![1350.0]);
    }

    #[test]
    fn period_filter_and_week_cap() {
        let r = vec![
            rec("a", 24 * 7, 5000.0),
            rec("a", 24 * 7 + 1, 5000.0),
            rec("a", 36 * 7 + 1, 5000.0),
        ];
        let cfg = PreprocessConfig {
            min_days_per_week: 1,
            period: Period::FollowUp,
            ..Default::default()
        };
        let (s, report) = preprocess(&r, &cfg).unwrap();
        assert_eq!(s[0].times, vec![25.0]);
        assert_eq!(report.records_beyond_last_week, 1);
        assert_eq!(report.records_outside_period, 1);
    }

    #[test]
    fn bad_records_rejected() {
        let dup = vec![rec("a", 1, 10.0), rec("a", 1, 20.0)];
        assert!(matches!(preprocess(&dup, &PreprocessConfig::default()), Err(FdaError::Input(_))));
        let neg = vec![rec("a", 1, -1.0)];
        assert!(matches!(preprocess(&neg, &PreprocessConfig::default()), Err(FdaError::Input(_))));
    }

    #[test]
    fn daily_aggregate_keeps_days() {
        let r = vec![rec("a", 1, 1200.0), rec("a", 2, 900.0), rec("a", 3, 1500.0)];
        let cfg = PreprocessConfig {
            aggregate: Aggregate::Daily,
            log_transform: false,
            ..Default::default()
        };
        let (s, _) = preprocess(&r, &cfg).unwrap();
        assert_eq!(s[0].times, vec![1.0, 3.0]);
    }

    #[test]
    fn imputation_fills_every_week() {
        let mut r = Vec::new();
        for i in 0..6 {
            for d in 1..=168 {
                if (d + i) % 5 != 0 && !(i == 0 && d > 100) {
                    r.push(rec(&format!("s{i}"), d, 3000.0 + 100.0 * i as f64 + d as f64));
                }
            }
        }
        let cfg = PreprocessConfig {
            impute_before_average: true,
            ..Default::default()
        };
        let (s, report) = preprocess(&r, &cfg).unwrap();
        assert!(report.imputed_days > 0);
        assert!(s.iter().all(|x| x.len() == 24));
    }

    #[test]
    fn covariate_coding_and_round_trip() {
        let csv = "subject_id,arm,age,stratum\n1,control,30,low\n2,competition,41.5,high\n3,support,22,low\n4,collaboration,35,high\n";
        let t = read_covariates(csv.as_bytes(), &CovariateSchema::default()).unwrap();
        assert_eq!(t.arm_levels(), vec!["collaboration", "competition", "support"]);
        let c = t.coded_row("1").unwrap();
        assert_eq!(c["arm_collaboration"] + c["arm_competition"] + c["arm_support"], 0.0);
        assert_eq!(t.coded_names(), vec!["arm_collaboration", "arm_competition", "arm_support", "age"]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = read_covariates(buf.as_slice(), &CovariateSchema::default()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn covariate_errors() {
        let empty = "subject_id,arm,age\n";
        assert!(matches!(
            read_covariates(empty.as_bytes(), &CovariateSchema::default()),
            Err(FdaError::Input(_))
        ));
        let bad = "subject_id,arm,age\n1,control,30\n2,control,old\n";
        match read_covariates(bad.as_bytes(), &CovariateSchema::default()) {
            Err(FdaError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "age");
            }
            other => panic!("{other:?}"),
        }
        let ok = "subject_id,arm,age\n1,control,30\n";
        let t = read_covariates(ok.as_bytes(), &CovariateSchema::default()).unwrap();
        let s = vec![
            FunctionalSample::new("1", vec![1.0], vec![1.0]).unwrap(),
            FunctionalSample::new("9", vec![1.0], vec![1.0]).unwrap(),
        ];
        match join_covariates(&s, &t) {
            Err(FdaError::Join(ids)) => assert_eq!(ids, vec!["9".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn long_csv_round_trip() {
        let s = vec![
            FunctionalSample::new("a", vec![1.0, 3.0], vec![7.25, 7.5]).unwrap(),
            FunctionalSample::new("b", vec![2.0], vec![8.0]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_long_csv(&s, &mut buf).unwrap();
        assert_eq!(read_long_csv(buf.as_slice()).unwrap(), s);
    }
}
