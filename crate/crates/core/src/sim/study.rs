//! Replication study runner producing accuracy and prediction tables.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{prepare, CausalConfig, CausalEstimate, PreparedDataset, WeightSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::metrics::{ise_aise_mise, isb, quantile, rmse_beta, root_mse};
use crate::sim::{generate_scenario, Scenario, ScenarioConfig, SimulatedDataset};

const TAG_SPLIT: u64 = 0x5B11;

/// The six stock estimators of the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    RegAdjust,
    FipwPara,
    FipwNp,
    DrPara,
    DrNp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::RegAdjust,
        Method::FipwPara,
        Method::FipwNp,
        Method::DrPara,
        Method::DrNp,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::RegAdjust => "reg_adjust",
            Method::FipwPara => "fipw_para",
            Method::FipwNp => "fipw_np",
            Method::DrPara => "dr_para",
            Method::DrNp => "dr_np",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.label() == s)
    }
}

/// One scenario cell of a study.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StudyCell {
    pub scenario: Scenario,
    pub n: usize,
    pub censor_target: f64,
    pub grid_size: usize,
}

/// Full study specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySettings {
    pub cells: Vec<StudyCell>,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Nonparametric penalty as a fraction of 1/n: rho = rho_frac / n.
    pub rho_frac: f64,
    pub config: CausalConfig,
    /// Training fraction of the prediction split.
    pub split_frac: f64,
    pub seed: u64,
    /// Keep per-replication curves for plotting exports.
    pub keep_curves: bool,
}

impl StudySettings {
    pub fn new(cells: Vec<StudyCell>, methods: Vec<Method>, reps: usize, seed: u64) -> Self {
        Self {
            cells,
            methods,
            reps,
            rho_frac: 0.01,
            config: CausalConfig::default(),
            split_frac: 0.8,
            seed,
            keep_curves: false,
        }
    }
}

/// Mean and quartiles of a per-replication metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

impl SummaryStats {
    fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            q25: quantile(values, 0.25),
            q50: quantile(values, 0.5),
            q75: quantile(values, 0.75),
        })
    }
}

/// Aggregated results for one (cell, method) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: Scenario,
    pub censor_target: f64,
    pub n: usize,
    pub method: Method,
    pub reps_requested: usize,
    pub reps_ok: usize,
    pub failures: usize,
    pub rmse: f64,
    pub isb: f64,
    pub aise: f64,
    pub aise_se: f64,
    pub mise: f64,
    pub root_mse_in: Option<SummaryStats>,
    pub root_mse_out: Option<SummaryStats>,
}

/// Study output: one row per (cell, method), plus optional curve dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub grid: Vec<f64>,
    /// Per-row replication curves when requested (row-aligned).
    pub curves: Option<Vec<Vec<Vec<f64>>>>,
    pub true_beta: Vec<f64>,
}

struct MethodRep {
    curve: Vec<f64>,
    rmse_in: f64,
    rmse_out: f64,
}

struct RepOutcome {
    /// One slot per requested method; `None` marks an estimator failure.
    per_method: Vec<Option<MethodRep>>,
}

fn estimate_by(
    prep: &PreparedDataset,
    method: Method,
    rho: f64,
) -> Result<CausalEstimate> {
    match method {
        Method::Naive => prep.naive(),
        Method::RegAdjust => prep.reg_adjust(),
        Method::FipwPara => prep.fipw(WeightSpec::Parametric),
        Method::FipwNp => prep.fipw(WeightSpec::Nonparametric(rho)),
        Method::DrPara => prep.double_robust(WeightSpec::Parametric),
        Method::DrNp => prep.double_robust(WeightSpec::Nonparametric(rho)),
    }
}

fn predict(est: &CausalEstimate, scores: &DMatrix<f64>) -> Vec<f64> {
    let base = scores * &est.fit.params.beta_scores;
    base.iter().map(|v| v + est.fit.params.alpha).collect()
}

fn run_rep(settings: &StudySettings, cell: &StudyCell, rep_seed: u64) -> Result<RepOutcome> {
    let cfg = ScenarioConfig {
        scenario: cell.scenario,
        n: cell.n,
        censor_target: cell.censor_target,
        grid_size: cell.grid_size,
        seed: rep_seed,
    };
    let mut sim = generate_scenario(&cfg)?;
    sim.data.config = settings.config;
    let n = sim.data.n();
    let rho = settings.rho_frac / n as f64;

    // prediction split
    let mut order: Vec<usize> = (0..n).collect();
    {
        let mut rng = stream_rng(rep_seed, &[TAG_SPLIT]);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let n_train = ((settings.split_frac * n as f64).ceil() as usize).clamp(1, n - 1);
    let (train_rows, test_rows) = order.split_at(n_train);

    let prep_full = prepare(&sim.data)?;
    let train_data = make_subset(&sim, train_rows, settings.config)?;
    let prep_train = prepare(&train_data)?;
    let rho_train = settings.rho_frac / train_rows.len() as f64;
    let test_treatment = sim.data.treatment.subset(test_rows);
    let test_scores = prep_train.basis.project(&test_treatment)?.scores;
    let causal_train: Vec<f64> = train_rows.iter().map(|&i| sim.causal_log_time[i]).collect();
    let causal_test: Vec<f64> = test_rows.iter().map(|&i| sim.causal_log_time[i]).collect();

    let mut per_method = Vec::with_capacity(settings.methods.len());
    for &method in &settings.methods {
        let full = estimate_by(&prep_full, method, rho);
        let train = estimate_by(&prep_train, method, rho_train);
        match (full, train) {
            (Ok(full), Ok(train)) => {
                let pred_in = predict(&train, &prep_train.scores);
                let pred_out = predict(&train, &test_scores);
                per_method.push(Some(MethodRep {
                    curve: full.beta_curve.iter().copied().collect(),
                    rmse_in: root_mse(&pred_in, &causal_train)?,
                    rmse_out: root_mse(&pred_out, &causal_test)?,
                }));
            }
            (Err(_), _) | (_, Err(_)) => per_method.push(None),
        }
    }
    Ok(RepOutcome { per_method })
}

fn make_subset(
    sim: &SimulatedDataset,
    rows: &[usize],
    config: CausalConfig,
) -> Result<crate::causal::CausalDataset> {
    let treatment = sim.data.treatment.subset(rows);
    let p = sim.data.covariates.ncols();
    let mut z = DMatrix::zeros(rows.len(), p);
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..p {
            z[(r, j)] = sim.data.covariates[(i, j)];
        }
    }
    let survival = sim.data.survival.subset(rows)?;
    crate::causal::CausalDataset::new(treatment, z, survival, config)
}

/// Run the replication study.
///
/// Replications get pre-assigned seeds derived from `(seed, cell index,
/// replication index)` and may run in parallel; aggregation is performed in
/// replication order so the output is identical at any thread count.
/// Estimator failures are counted per method and excluded from aggregates.
pub fn run_study(settings: &StudySettings, threads: usize) -> Result<StudyResult> {
    if settings.reps < 2 {
        return Err(Error::InvalidInput("need at least 2 replications".into()));
    }
    if settings.cells.is_empty() || settings.methods.is_empty() {
        return Err(Error::InvalidInput("empty study".into()));
    }
    let run = || -> Result<StudyResult> { run_study_inner(settings) };
    if threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }
}

fn run_study_inner(settings: &StudySettings) -> Result<StudyResult> {
    let grid_size = settings.cells[0].grid_size;
    let grid: Vec<f64> = (0..grid_size)
        .map(|j| j as f64 / (grid_size - 1) as f64)
        .collect();
    let truth: Vec<f64> = grid.iter().map(|&s| crate::sim::true_beta(s)).collect();

    let mut rows = Vec::new();
    let mut curve_dump: Vec<Vec<Vec<f64>>> = Vec::new();
    for (cell_idx, cell) in settings.cells.iter().enumerate() {
        let outcomes: Vec<Result<RepOutcome>> = (0..settings.reps)
            .into_par_iter()
            .map(|rep| {
                let rep_seed = derive_seed(settings.seed, &[cell_idx as u64, rep as u64]);
                run_rep(settings, cell, rep_seed)
            })
            .collect();
        let mut ok_reps: Vec<RepOutcome> = Vec::with_capacity(settings.reps);
        for o in outcomes {
            ok_reps.push(o?);
        }
        for (m_idx, &method) in settings.methods.iter().enumerate() {
            let mut curves: Vec<Vec<f64>> = Vec::new();
            let mut rin = Vec::new();
            let mut rout = Vec::new();
            let mut failures = 0usize;
            for rep in &ok_reps {
                match &rep.per_method[m_idx] {
                    Some(r) => {
                        curves.push(r.curve.clone());
                        rin.push(r.rmse_in);
                        rout.push(r.rmse_out);
                    }
                    None => failures += 1,
                }
            }
            let (row_rmse, row_isb, aise, aise_se, mise) = if curves.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                let m = grid.len();
                let mut mean_curve = vec![0.0; m];
                for c in &curves {
                    for j in 0..m {
                        mean_curve[j] += c[j];
                    }
                }
                for v in &mut mean_curve {
                    *v /= curves.len() as f64;
                }
                let (aise, se, mise) = ise_aise_mise(&curves, &truth, &grid)?;
                (
                    rmse_beta(&mean_curve, &truth, &grid)?,
                    isb(&mean_curve, &truth, &grid)?,
                    aise,
                    se,
                    mise,
                )
            };
            rows.push(StudyRow {
                scenario: cell.scenario,
                censor_target: cell.censor_target,
                n: cell.n,
                method,
                reps_requested: settings.reps,
                reps_ok: curves.len(),
                failures,
                rmse: row_rmse,
                isb: row_isb,
                aise,
                aise_se,
                mise,
                root_mse_in: SummaryStats::from_values(&rin),
                root_mse_out: SummaryStats::from_values(&rout),
            });
            if settings.keep_curves {
                curve_dump.push(curves);
            }
        }
    }
    Ok(StudyResult {
        rows,
        grid,
        curves: if settings.keep_curves {
            Some(curve_dump)
        } else {
            None
        },
        true_beta: truth,
    })
}
