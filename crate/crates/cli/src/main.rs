//! Command-line front end: simulation studies, fitting external CSV data,
//! and covariate-balance diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fcsurv::causal::{bootstrap_se, prepare, CausalConfig, CausalDataset, EstimatorSpec, WeightSpec};
use fcsurv::io;
use fcsurv::sim::study::{run_study, Method, StudyCell, StudySettings};
use fcsurv::sim::Scenario;
use fcsurv::weights::{balance_diagnostics, fit_nonparametric_weights, fit_parametric_weights, CovariateKind};
use fcsurv::Error;

#[derive(Parser, Debug)]
#[command(name = "fcsurv")]
#[command(about = "Functional causal survival analysis", long_about = None)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a replication study and write study.csv / study.json.
    Simulate(SimulateArgs),
    /// Fit a causal estimator on external CSV data.
    Fit(FitArgs),
    /// Covariate balance diagnostics across weighting schemes.
    Balance(BalanceArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScenarioArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightsArg {
    Para,
    Np,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RhoArg {
    /// rho = 0.1 / n
    Default,
    /// rho = 1 / n (more tolerated imbalance)
    Loose,
    /// rho = 0.01 / n (less tolerated imbalance)
    Tight,
}

impl RhoArg {
    fn fraction(self) -> f64 {
        match self {
            RhoArg::Default => 0.1,
            RhoArg::Loose => 1.0,
            RhoArg::Tight => 0.01,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Comma-separated censoring targets, e.g. "0.2,0.4,0.6".
    #[arg(long)]
    censoring: Option<String>,
    /// Comma-separated method labels (default: all six).
    #[arg(long)]
    method: Option<String>,
    /// Penalty preset for the nonparametric study estimators.
    #[arg(long, value_enum)]
    rho: Option<RhoArg>,
    #[arg(long)]
    pve: Option<f64>,
    #[arg(long)]
    pve_weights: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Write per-replication coefficient curves under out/curves/.
    #[arg(long, default_value_t = false)]
    dump_curves: bool,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    seed: Option<u64>,
    reps: Option<usize>,
    n: Option<usize>,
    scenario: Option<String>,
    censoring: Option<Vec<f64>>,
    methods: Option<Vec<String>>,
    rho: Option<String>,
    pve: Option<f64>,
    pve_weights: Option<f64>,
    out: Option<String>,
    threads: Option<usize>,
    dump_curves: Option<bool>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Treatment CSV (grid header plus an id column).
    #[arg(long)]
    treatment: PathBuf,
    /// Covariate CSV (id,<names...>).
    #[arg(long)]
    covariates: PathBuf,
    /// Survival CSV (id,time,status).
    #[arg(long)]
    survival: PathBuf,
    /// Estimator: naive, reg_adjust, fipw_para, fipw_np, dr_para, dr_np.
    #[arg(long, default_value = "dr_np")]
    method: String,
    #[arg(long, value_enum)]
    rho: Option<RhoArg>,
    #[arg(long)]
    pve: Option<f64>,
    #[arg(long)]
    pve_weights: Option<f64>,
    /// Pairs-bootstrap replicates for coefficient standard errors.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Winsorize fitted weights at this upper quantile (sensitivity flag).
    #[arg(long)]
    clip_weights: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BalanceArgs {
    #[arg(long)]
    treatment: PathBuf,
    #[arg(long)]
    covariates: PathBuf,
    /// Weighting schemes to evaluate besides unit weights.
    #[arg(long, value_enum)]
    weights: Vec<WeightsArg>,
    #[arg(long, value_enum)]
    rho: Option<RhoArg>,
    #[arg(long)]
    pve_weights: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit codes: 2 config, 3 data, 4 estimation.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::DimensionMismatch(_) => 2,
        Error::DataFormat { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        _ => 4,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code_for(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Balance(args) => cmd_balance(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn parse_methods(spec: &str) -> Result<Vec<Method>, Error> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            Method::parse(s).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown method {s:?} (expected one of: {})",
                    Method::ALL.map(|m| m.label()).join(", ")
                ))
            })
        })
        .collect()
}

fn load_config(path: &Path) -> Result<SimulateConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::InvalidInput(format!("config {}: {e}", path.display()))
    })
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => SimulateConfig::default(),
    };
    let seed = args.seed.or(cfg.seed).unwrap_or(20240809);
    let reps = args.reps.or(cfg.reps).unwrap_or(100);
    let n = args.n.or(cfg.n).unwrap_or(400);
    let scenarios: Vec<Scenario> = match (&args.scenario, cfg.scenario.as_deref()) {
        (Some(ScenarioArg::One), _) => vec![Scenario::One],
        (Some(ScenarioArg::Two), _) => vec![Scenario::Two],
        (Some(ScenarioArg::All), _) => vec![Scenario::One, Scenario::Two],
        (None, Some("1")) => vec![Scenario::One],
        (None, Some("2")) => vec![Scenario::Two],
        (None, Some("all")) | (None, None) => vec![Scenario::One, Scenario::Two],
        (None, Some(other)) => {
            return Err(Error::InvalidInput(format!(
                "config scenario must be \"1\", \"2\", or \"all\", got {other:?}"
            )))
        }
    };
    let censoring = match &args.censoring {
        Some(s) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("bad censoring value {v:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => cfg.censoring.unwrap_or_else(|| vec![0.2]),
    };
    let methods = match &args.method {
        Some(s) => parse_methods(s)?,
        None => match &cfg.methods {
            Some(list) => parse_methods(&list.join(","))?,
            None => Method::ALL.to_vec(),
        },
    };
    let rho = match (args.rho, cfg.rho.as_deref()) {
        (Some(r), _) => r,
        (None, Some("default")) | (None, None) => RhoArg::Tight,
        (None, Some("loose")) => RhoArg::Loose,
        (None, Some("tight")) => RhoArg::Tight,
        (None, Some(other)) => {
            return Err(Error::InvalidInput(format!(
                "config rho must be default/loose/tight, got {other:?}"
            )))
        }
    };
    let out = args
        .out
        .or_else(|| cfg.out.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("study-out"));
    let threads = args.threads.or(cfg.threads).unwrap_or(0);
    let dump_curves = args.dump_curves || cfg.dump_curves.unwrap_or(false);

    let mut config = CausalConfig::default();
    if let Some(p) = args.pve.or(cfg.pve) {
        config.pve_outcome = p;
    }
    if let Some(p) = args.pve_weights.or(cfg.pve_weights) {
        config.pve_weights = p;
    }

    let cells: Vec<StudyCell> = scenarios
        .iter()
        .flat_map(|&scenario| {
            censoring.iter().map(move |&censor_target| StudyCell {
                scenario,
                n,
                censor_target,
                grid_size: 101,
            })
        })
        .collect();
    let mut settings = StudySettings::new(cells, methods, reps, seed);
    settings.rho_frac = rho.fraction();
    settings.config = config;
    settings.keep_curves = dump_curves;

    std::fs::create_dir_all(&out)?;
    let result = run_study(&settings, threads)?;
    io::write_study_csv(&out.join("study.csv"), &result)?;
    io::write_study_json(&out.join("study.json"), &result)?;
    if let Some(curves) = &result.curves {
        let dir = out.join("curves");
        std::fs::create_dir_all(&dir)?;
        for (row, reps_curves) in result.rows.iter().zip(curves) {
            let name = format!(
                "s{}_c{}_{}.csv",
                row.scenario.label(),
                (row.censor_target * 100.0).round() as usize,
                row.method.label()
            );
            let mut w = csv::WriterBuilder::new().from_path(dir.join(name))?;
            let header: Vec<String> = result.grid.iter().map(|s| s.to_string()).collect();
            w.write_record(&header)?;
            for curve in reps_curves {
                w.write_record(curve.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
    }
    let failures: usize = result.rows.iter().map(|r| r.failures).sum();
    println!(
        "wrote {} rows to {} ({} estimator failures)",
        result.rows.len(),
        out.display(),
        failures
    );
    Ok(())
}

struct LoadedData {
    data: CausalDataset,
    covariate_names: Vec<String>,
    kinds: Vec<CovariateKind>,
}

fn load_dataset(
    treatment: &Path,
    covariates: &Path,
    survival: Option<&Path>,
    config: CausalConfig,
) -> Result<LoadedData, Error> {
    let (sample, treat_ids) = io::read_treatment_csv(treatment)?;
    let treat_ids = treat_ids.ok_or_else(|| Error::DataFormat {
        file: treatment.display().to_string(),
        line: 1,
        message: "treatment file needs an `id` column for alignment".into(),
    })?;
    let (cov_ids, names, z_raw) = io::read_covariates_csv(covariates)?;
    let order = io::align_ids(&treat_ids, &cov_ids, covariates)?;
    let mut z = nalgebra::DMatrix::zeros(z_raw.nrows(), z_raw.ncols());
    for (r, &i) in order.iter().enumerate() {
        for j in 0..z_raw.ncols() {
            z[(r, j)] = z_raw[(i, j)];
        }
    }
    let kinds: Vec<CovariateKind> = (0..z.ncols())
        .map(|j| {
            if z.column(j).iter().all(|&v| v == 0.0 || v == 1.0) {
                CovariateKind::Binary
            } else {
                CovariateKind::Continuous
            }
        })
        .collect();
    let surv = match survival {
        Some(path) => {
            let (surv_ids, s) = io::read_survival_csv(path)?;
            let order = io::align_ids(&treat_ids, &surv_ids, path)?;
            s.subset(&order)?
        }
        None => {
            // balance diagnostics need no outcomes; build a placeholder
            fcsurv::survival::SurvivalSample::from_log_times(
                vec![0.0; sample.n()],
                vec![true; sample.n()],
            )?
        }
    };
    let data = CausalDataset::new(sample, z, surv, config)?;
    Ok(LoadedData {
        data,
        covariate_names: names,
        kinds,
    })
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let method = Method::parse(&args.method).ok_or_else(|| {
        Error::InvalidInput(format!(
            "unknown method {:?} (expected one of: {})",
            args.method,
            Method::ALL.map(|m| m.label()).join(", ")
        ))
    })?;
    let mut config = CausalConfig::default();
    if let Some(p) = args.pve {
        config.pve_outcome = p;
    }
    if let Some(p) = args.pve_weights {
        config.pve_weights = p;
    }
    config.clip_weights = args.clip_weights;
    let loaded = load_dataset(
        &args.treatment,
        &args.covariates,
        Some(&args.survival),
        config,
    )?;
    let rho = args.rho.unwrap_or(RhoArg::Tight);
    let nonpar = WeightSpec::Nonparametric(rho.fraction() / loaded.data.n() as f64);
    let spec = match method {
        Method::Naive => EstimatorSpec::Naive,
        Method::RegAdjust => EstimatorSpec::RegAdjust,
        Method::FipwPara => EstimatorSpec::Fipw(WeightSpec::Parametric),
        Method::FipwNp => EstimatorSpec::Fipw(nonpar),
        Method::DrPara => EstimatorSpec::DoubleRobust(WeightSpec::Parametric),
        Method::DrNp => EstimatorSpec::DoubleRobust(nonpar),
    };
    let prep = prepare(&loaded.data)?;
    let mut est = spec.run(&prep)?;
    if let Some(b) = args.bootstrap {
        let seed = args.seed.unwrap_or(20240809);
        est.fit.se = Some(bootstrap_se(&loaded.data, spec, b, seed)?);
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("fit-out"));
    std::fs::create_dir_all(&out)?;
    let grid = loaded.data.treatment.grid();
    let export = io::EstimateExport::from_estimate(&est, grid);
    let f = std::fs::File::create(out.join("estimate.json"))?;
    serde_json::to_writer_pretty(f, &export)?;
    let curve: Vec<f64> = est.beta_curve.iter().copied().collect();
    io::write_curve_csv(&out.join("beta_curve.csv"), grid, &curve)?;
    println!(
        "method {} | K = {} | converged = {} after {} iterations (step {:.2e})",
        method.label(),
        est.fit.params.beta_scores.len(),
        est.fit.converged,
        est.fit.iterations,
        est.fit.final_step_norm
    );
    if let Some(ws) = &est.weights {
        println!(
            "weights: min {:.3}, max {:.3}, ESS {:.1}, max |corr| {:.4}",
            ws.weights.iter().cloned().fold(f64::INFINITY, f64::min),
            ws.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ws.effective_sample_size(),
            ws.diagnostics.max_abs_corr
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_balance(args: BalanceArgs) -> Result<(), Error> {
    let mut config = CausalConfig::default();
    if let Some(p) = args.pve_weights {
        config.pve_weights = p;
        config.pve_outcome = p;
    }
    let loaded = load_dataset(&args.treatment, &args.covariates, None, config)?;
    // diagnostics only need standardized scores; the whitened covariates are
    // built lazily when a weighting scheme is requested, so degenerate
    // (constant) covariate columns can still be reported
    let (basis_w, scores) =
        fcsurv::fpca::estimate_fpca(&loaded.data.treatment, config.pve_weights)?;
    let a_star = fcsurv::fpca::standardize_scores(&scores, &basis_w)?
        .standardized
        .expect("standardized scores");
    let out = args.out.unwrap_or_else(|| PathBuf::from("balance-out"));
    std::fs::create_dir_all(&out)?;
    let n = loaded.data.n();

    // reported correlations are against the raw covariates (the balancing
    // constraints themselves act on the whitened Z*)
    let raw_z = &loaded.data.covariates.clone();
    let unit = balance_diagnostics(&vec![1.0; n], &a_star, raw_z, &loaded.kinds)?;
    io::write_balance_csv(&out.join("balance_unweighted.csv"), &unit, &loaded.covariate_names)?;
    io::write_balance_flags_csv(
        &out.join("balance_unweighted_flags.csv"),
        &unit,
        &loaded.covariate_names,
    )?;
    let max_unit = unit
        .per_covariate_corr
        .iter()
        .cloned()
        .fold(0.0_f64, f64::max);
    println!("unweighted max |corr| = {max_unit:.4}");

    let rho = args.rho.unwrap_or(RhoArg::Default);
    let z_star = if args.weights.is_empty() {
        None
    } else {
        Some(prepare(&loaded.data)?.z_star)
    };
    for scheme in &args.weights {
        let z_star = z_star.as_ref().expect("built when schemes are requested");
        let (label, set) = match scheme {
            WeightsArg::Para => (
                "para".to_string(),
                fit_parametric_weights(&a_star, z_star)?.1,
            ),
            WeightsArg::Np => (
                format!("np_{}", rho.fraction()),
                fit_nonparametric_weights(&a_star, z_star, rho.fraction() / n as f64)?,
            ),
        };
        let rep = balance_diagnostics(&set.weights, &a_star, raw_z, &loaded.kinds)?;
        io::write_balance_csv(
            &out.join(format!("balance_{label}.csv")),
            &rep,
            &loaded.covariate_names,
        )?;
        io::write_balance_flags_csv(
            &out.join(format!("balance_{label}_flags.csv")),
            &rep,
            &loaded.covariate_names,
        )?;
        let max_w = rep
            .per_covariate_corr
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max);
        println!("{label} max |corr| = {max_w:.4}");
    }
    println!("wrote {}", out.display());
    Ok(())
}
