//! CSV and JSON formats used by the command-line tools.
//!
//! Schemas:
//! - treatment CSV: header row holds the grid abscissae (optionally after an
//!   `id` column), each following row one curve;
//! - covariate CSV: `id,<name>,...`;
//! - survival CSV: `id,time,status` with positive times and 0/1 status;
//! - curve CSV: `s,value`;
//! - study CSV: one row per (scenario, censoring, method).

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::causal::CausalEstimate;
use crate::error::{Error, Result};
use crate::fpca::FunctionalSample;
use crate::sim::study::{StudyResult, StudyRow};
use crate::survival::SurvivalSample;
use crate::weights::BalanceReport;

fn data_err(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::DataFormat {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a treatment CSV. Returns the sample and the ids when present.
pub fn read_treatment_csv(path: &Path) -> Result<(FunctionalSample, Option<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| data_err(path, 1, "empty treatment file"))??;
    let mut fields: Vec<&str> = header.iter().map(str::trim).collect();
    let has_id = fields
        .first()
        .map(|f| f.eq_ignore_ascii_case("id"))
        .unwrap_or(false);
    if has_id {
        fields.remove(0);
    }
    let grid: Vec<f64> = fields
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.parse::<f64>()
                .map_err(|_| data_err(path, 1, format!("grid column {}: not a number: {f:?}", i + 1)))
        })
        .collect::<Result<_>>()?;
    let m = grid.len();
    let mut ids = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (ridx, rec) in rows.enumerate() {
        let rec = rec?;
        let line = ridx + 2;
        let mut it = rec.iter().map(str::trim);
        if has_id {
            ids.push(
                it.next()
                    .ok_or_else(|| data_err(path, line, "missing id"))?
                    .to_string(),
            );
        }
        let vals: Vec<&str> = it.collect();
        if vals.len() != m {
            return Err(data_err(
                path,
                line,
                format!("expected {m} values, found {}", vals.len()),
            ));
        }
        for (c, v) in vals.iter().enumerate() {
            values.push(v.parse::<f64>().map_err(|_| {
                data_err(path, line, format!("column {}: not a number: {v:?}", c + 1))
            })?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(data_err(path, 2, "no curves in treatment file"));
    }
    let mat = DMatrix::from_row_slice(n, m, &values);
    let sample = FunctionalSample::new(grid, mat)
        .map_err(|e| data_err(path, 1, e.to_string()))?;
    Ok((sample, if has_id { Some(ids) } else { None }))
}

/// Write a treatment CSV (grid header, one row per curve).
pub fn write_treatment_csv(
    path: &Path,
    sample: &FunctionalSample,
    ids: Option<&[String]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::new();
    if ids.is_some() {
        header.push("id".into());
    }
    header.extend(sample.grid().iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for i in 0..sample.n() {
        let mut rec: Vec<String> = Vec::new();
        if let Some(ids) = ids {
            rec.push(ids[i].clone());
        }
        rec.extend(sample.values().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a covariate CSV: `id,<name>,...`.
pub fn read_covariates_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| data_err(path, 1, "empty covariate file"))??;
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.is_empty() || !fields[0].eq_ignore_ascii_case("id") {
        return Err(data_err(path, 1, "covariate file must start with an `id` column"));
    }
    let names: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(data_err(path, 1, "covariate file has no covariate columns"));
    }
    let p = names.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (ridx, rec) in rows.enumerate() {
        let rec = rec?;
        let line = ridx + 2;
        if rec.len() != p + 1 {
            return Err(data_err(
                path,
                line,
                format!("expected {} fields, found {}", p + 1, rec.len()),
            ));
        }
        ids.push(rec[0].trim().to_string());
        for c in 0..p {
            let f = rec[c + 1].trim();
            values.push(f.parse::<f64>().map_err(|_| {
                data_err(path, line, format!("column {}: not a number: {f:?}", names[c]))
            })?);
        }
    }
    if ids.is_empty() {
        return Err(data_err(path, 2, "no rows in covariate file"));
    }
    Ok((
        ids.clone(),
        names,
        DMatrix::from_row_slice(ids.len(), p, &values),
    ))
}

/// Write a covariate CSV.
pub fn write_covariates_csv(
    path: &Path,
    ids: &[String],
    names: &[String],
    z: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..z.nrows() {
        let mut rec = vec![ids[i].clone()];
        rec.extend(z.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a survival CSV: `id,time,status`.
pub fn read_survival_csv(path: &Path) -> Result<(Vec<String>, SurvivalSample)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| data_err(path, 1, "empty survival file"))??;
    let fields: Vec<String> = header.iter().map(|s| s.trim().to_lowercase()).collect();
    let idx_of = |name: &str| -> Result<usize> {
        fields
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| data_err(path, 1, format!("missing required column `{name}`")))
    };
    let (i_id, i_time, i_status) = (idx_of("id")?, idx_of("time")?, idx_of("status")?);
    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut delta = Vec::new();
    for (ridx, rec) in rows.enumerate() {
        let rec = rec?;
        let line = ridx + 2;
        if rec.len() != fields.len() {
            return Err(data_err(
                path,
                line,
                format!("expected {} fields, found {}", fields.len(), rec.len()),
            ));
        }
        ids.push(rec[i_id].trim().to_string());
        let t: f64 = rec[i_time]
            .trim()
            .parse()
            .map_err(|_| data_err(path, line, format!("time: not a number: {:?}", &rec[i_time])))?;
        if !(t > 0.0) {
            return Err(data_err(path, line, "obs_time must be positive"));
        }
        times.push(t);
        let s = rec[i_status].trim();
        match s {
            "0" => delta.push(false),
            "1" => delta.push(true),
            _ => return Err(data_err(path, line, format!("status must be 0 or 1, got {s:?}"))),
        }
    }
    if ids.is_empty() {
        return Err(data_err(path, 2, "no rows in survival file"));
    }
    let sample = SurvivalSample::from_times(times, delta)
        .map_err(|e| data_err(path, 2, e.to_string()))?;
    Ok((ids, sample))
}

/// Write a survival CSV.
pub fn write_survival_csv(path: &Path, ids: &[String], sample: &SurvivalSample) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "time", "status"])?;
    for i in 0..sample.n() {
        w.write_record([
            ids[i].clone(),
            sample.obs_time()[i].to_string(),
            if sample.delta()[i] { "1".into() } else { "0".into() },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reorder rows of `other_ids` to match `reference_ids`, erroring on
/// mismatched id sets.
pub fn align_ids(reference_ids: &[String], other_ids: &[String], file: &Path) -> Result<Vec<usize>> {
    if reference_ids.len() != other_ids.len() {
        return Err(data_err(
            file,
            1,
            format!(
                "row count {} does not match treatment rows {}",
                other_ids.len(),
                reference_ids.len()
            ),
        ));
    }
    let mut index = std::collections::HashMap::with_capacity(other_ids.len());
    for (i, id) in other_ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(data_err(file, i + 2, format!("duplicate id {id:?}")));
        }
    }
    reference_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| data_err(file, 1, format!("id {id:?} missing")))
        })
        .collect()
}

/// Write a `s,value` curve CSV.
pub fn write_curve_csv(path: &Path, grid: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["s", "value"])?;
    for (s, v) in grid.iter().zip(values) {
        w.write_record([s.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Study table header.
pub const STUDY_CSV_HEADER: [&str; 20] = [
    "scenario",
    "censoring",
    "n",
    "method",
    "reps",
    "reps_ok",
    "failures",
    "rmse",
    "isb",
    "aise",
    "aise_se",
    "mise",
    "rootmse_in_mean",
    "rootmse_in_q25",
    "rootmse_in_q50",
    "rootmse_in_q75",
    "rootmse_out_mean",
    "rootmse_out_q25",
    "rootmse_out_q50",
    "rootmse_out_q75",
];

fn row_record(row: &StudyRow) -> Vec<String> {
    let stats = |s: &Option<crate::sim::study::SummaryStats>| -> [String; 4] {
        match s {
            Some(s) => [
                s.mean.to_string(),
                s.q25.to_string(),
                s.q50.to_string(),
                s.q75.to_string(),
            ],
            None => std::array::from_fn(|_| "nan".to_string()),
        }
    };
    let mut rec = vec![
        row.scenario.label().to_string(),
        row.censor_target.to_string(),
        row.n.to_string(),
        row.method.label().to_string(),
        row.reps_requested.to_string(),
        row.reps_ok.to_string(),
        row.failures.to_string(),
        row.rmse.to_string(),
        row.isb.to_string(),
        row.aise.to_string(),
        row.aise_se.to_string(),
        row.mise.to_string(),
    ];
    rec.extend(stats(&row.root_mse_in));
    rec.extend(stats(&row.root_mse_out));
    rec
}

/// Write the study table as CSV.
pub fn write_study_csv(path: &Path, result: &StudyResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STUDY_CSV_HEADER)?;
    for row in &result.rows {
        w.write_record(row_record(row))?;
    }
    w.flush()?;
    Ok(())
}

/// Write the study result as JSON.
pub fn write_study_json(path: &Path, result: &StudyResult) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(f, result)?;
    Ok(())
}

/// Serializable view of a causal estimate for the `fit` command.
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateExport {
    pub method: String,
    pub weight_method: Option<String>,
    pub alpha: f64,
    pub beta_scores: Vec<f64>,
    pub gamma: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_step_norm: f64,
    pub residual_scale: f64,
    pub grid: Vec<f64>,
    pub beta_curve: Vec<f64>,
    pub weight_summary: Option<WeightSummary>,
    pub se: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub effective_sample_size: f64,
    pub max_abs_corr: f64,
}

impl EstimateExport {
    pub fn from_estimate(est: &CausalEstimate, grid: &[f64]) -> Self {
        let weight_summary = est.weights.as_ref().map(|w| WeightSummary {
            min: w.weights.iter().cloned().fold(f64::INFINITY, f64::min),
            max: w.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: w.weights.iter().sum::<f64>() / w.weights.len() as f64,
            effective_sample_size: w.effective_sample_size(),
            max_abs_corr: w.diagnostics.max_abs_corr,
        });
        Self {
            method: format!("{:?}", est.method),
            weight_method: est.weight_method.map(|w| format!("{w:?}")),
            alpha: est.fit.params.alpha,
            beta_scores: est.fit.params.beta_scores.iter().copied().collect(),
            gamma: est.fit.params.gamma.iter().copied().collect(),
            converged: est.fit.converged,
            iterations: est.fit.iterations,
            final_step_norm: est.fit.final_step_norm,
            residual_scale: est.fit.residual_scale,
            grid: grid.to_vec(),
            beta_curve: est.beta_curve.iter().copied().collect(),
            weight_summary,
            se: est.fit.se.as_ref().map(|s| s.iter().copied().collect()),
        }
    }
}

/// Write balance correlations as CSV: rows = FPC index, columns = covariates.
pub fn write_balance_csv(path: &Path, report: &BalanceReport, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fpc".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for k in 0..report.per_covariate_corr.nrows() {
        let mut rec = vec![(k + 1).to_string()];
        for j in 0..report.per_covariate_corr.ncols() {
            rec.push(report.per_covariate_corr[(k, j)].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write balance degeneracy flags as CSV (same shape as the correlations).
pub fn write_balance_flags_csv(path: &Path, report: &BalanceReport, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fpc".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (k, row) in report.degenerate.iter().enumerate() {
        let mut rec = vec![(k + 1).to_string()];
        for &flag in row {
            rec.push(if flag { "1".into() } else { "0".to_string() });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
