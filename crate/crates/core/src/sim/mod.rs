//! Simulation designs: data generation for the two confounding scenarios,
//! censoring calibration, accuracy metrics, and the replication study runner.

pub mod metrics;
pub mod study;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::causal::{CausalConfig, CausalDataset};
use crate::error::{Error, Result};
use crate::fpca::FunctionalSample;
use crate::rng::stream_rng;
use crate::survival::SurvivalSample;

const TAG_DATA: u64 = 0xDA7A;
const TAG_CENSOR: u64 = 0xCE45;
const TAG_CALIBRATE: u64 = 0xCA11;

/// Scale constants of the six generating scores.
const SCORE_SCALE: [f64; 6] = [
    4.0,
    3.464101615137754_f64, // sqrt(12)
    2.8284271247461903_f64, // sqrt(8)
    2.0,
    1.0,
    std::f64::consts::FRAC_1_SQRT_2,
];

/// Confounding strength of the generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Linear confounding through Z1.
    One,
    /// Adds the nonlinear term 2 Z1^2 A1.
    Two,
}

impl Scenario {
    pub fn label(&self) -> &'static str {
        match self {
            Scenario::One => "1",
            Scenario::Two => "2",
        }
    }
}

/// One simulated-dataset configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    /// Target right-censoring fraction in [0, 0.9].
    pub censor_target: f64,
    pub grid_size: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, censor_target: f64, seed: u64) -> Self {
        Self {
            scenario,
            n,
            censor_target,
            grid_size: 101,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::InvalidInput(format!("n must be >= 50, got {}", self.n)));
        }
        if !(0.0..0.9 + 1e-12).contains(&self.censor_target) {
            return Err(Error::InvalidInput(format!(
                "censor_target must be in [0, 0.9], got {}",
                self.censor_target
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidInput("grid_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Generated dataset plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub data: CausalDataset,
    /// True coefficient curve on the grid.
    pub true_beta_curve: Vec<f64>,
    /// Uncensored log event times.
    pub true_log_time: Vec<f64>,
    /// Response noise terms.
    pub errors: Vec<f64>,
    /// n x 6 latent normals.
    pub w_mat: DMatrix<f64>,
    /// n x 6 generating scores A = W * scale.
    pub a_mat: DMatrix<f64>,
    /// Causal outcome: confounder contribution replaced by its population
    /// mean given the treatment.
    pub causal_log_time: Vec<f64>,
}

/// True coefficient curve `2 sin(2 pi s) + cos(2 pi s) + sin(4 pi s)/2 + cos(4 pi s)/2`.
pub fn true_beta(s: f64) -> f64 {
    use std::f64::consts::PI;
    2.0 * (2.0 * PI * s).sin() + (2.0 * PI * s).cos() + 0.5 * (4.0 * PI * s).sin()
        + 0.5 * (4.0 * PI * s).cos()
}

fn basis_fn(k: usize, s: f64) -> f64 {
    use std::f64::consts::PI;
    let freq = (k / 2 + 1) as f64;
    if k.is_multiple_of(2) {
        (2.0 * PI * freq * s).sin()
    } else {
        (2.0 * PI * freq * s).cos()
    }
}

struct OutcomeDraw {
    w: [f64; 6],
    z: [f64; 3],
    noise: f64,
    y: f64,
    int_beta_x: f64,
}

fn draw_outcome(scenario: Scenario, rng: &mut ChaCha12Rng) -> OutcomeDraw {
    let mut w = [0.0; 6];
    for wk in &mut w {
        *wk = rng.sample(StandardNormal);
    }
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    let e3: f64 = rng.sample(StandardNormal);
    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
    let z = [w[0] + 0.5 * e1, 0.2 * w[1] + e2, 0.2 * w[2] + e3];
    let a: Vec<f64> = (0..6).map(|k| SCORE_SCALE[k] * w[k]).collect();
    // closed-form quadrature of the true coefficient against the basis
    let int_beta_x = a[0] + 0.5 * a[1] + 0.25 * a[2] + 0.25 * a[3];
    let mut y = 1.0 + int_beta_x + 2.0 * z[0] + noise;
    if scenario == Scenario::Two {
        y += 2.0 * z[0] * z[0] * a[0];
    }
    OutcomeDraw {
        w,
        z,
        noise,
        y,
        int_beta_x,
    }
}

/// Population mean of Z1^2 under the generating law.
pub const EXPECTED_Z1_SQ: f64 = 1.25;

/// Calibrate the censoring window `C ~ Uniform(a, b)`.
///
/// A probe sample of outcomes fixes the window family `(m/2, 3m/2)` and the
/// midpoint is bisected on the log scale until the probe's empirical
/// censoring rate is within one percent of the target. Deterministic given
/// the seed.
pub fn calibrate_censoring(
    scenario: Scenario,
    n_probe: usize,
    censor_target: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if !(0.0..=0.9).contains(&censor_target) {
        return Err(Error::InvalidInput(format!(
            "censor_target must be in [0, 0.9], got {censor_target}"
        )));
    }
    let mut rng = stream_rng(seed, &[TAG_CALIBRATE]);
    let mut crit = Vec::with_capacity(n_probe);
    let mut y_max = f64::NEG_INFINITY;
    for _ in 0..n_probe {
        let d = draw_outcome(scenario, &mut rng);
        let u: f64 = rng.gen_range(0.0..1.0);
        // censored iff Y > log C with C = m (0.5 + u)
        crit.push(d.y - (0.5 + u).ln());
        y_max = y_max.max(d.y);
    }
    if censor_target == 0.0 {
        // a window strictly above the probe maximum keeps every probe event
        let t_max = y_max.min(700.0).exp();
        return Ok((2.0 * t_max, 3.0 * t_max));
    }
    let rate = |u: f64| -> f64 {
        crit.iter().filter(|&&c| c > u).count() as f64 / n_probe as f64
    };
    let mut lo = crit.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = crit.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > censor_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    let achieved = rate(u);
    if (achieved - censor_target).abs() > 0.01 {
        return Err(Error::CensoringUnreachable {
            target: censor_target,
            achieved,
        });
    }
    let m = u.exp();
    if !m.is_finite() || !(m > 0.0) {
        return Err(Error::CensoringUnreachable {
            target: censor_target,
            achieved,
        });
    }
    Ok((0.5 * m, 1.5 * m))
}

/// Generate one dataset under the configured scenario.
///
/// Reproducible from the seed; the censoring stream is independent of the
/// data stream so the underlying outcomes are identical across censoring
/// targets at a fixed seed.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let n = config.n;
    let m = config.grid_size;
    let grid: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();

    let mut rng = stream_rng(config.seed, &[TAG_DATA]);
    let mut w_mat = DMatrix::zeros(n, 6);
    let mut a_mat = DMatrix::zeros(n, 6);
    let mut z = DMatrix::zeros(n, 3);
    let mut y = Vec::with_capacity(n);
    let mut errors = Vec::with_capacity(n);
    let mut causal = Vec::with_capacity(n);
    for i in 0..n {
        let d = draw_outcome(config.scenario, &mut rng);
        for k in 0..6 {
            w_mat[(i, k)] = d.w[k];
            a_mat[(i, k)] = SCORE_SCALE[k] * d.w[k];
        }
        for j in 0..3 {
            z[(i, j)] = d.z[j];
        }
        let mut yc = 1.0 + d.int_beta_x + d.noise;
        if config.scenario == Scenario::Two {
            yc += 2.0 * EXPECTED_Z1_SQ * a_mat[(i, 0)];
        }
        causal.push(yc);
        errors.push(d.noise);
        y.push(d.y);
    }

    let mut values = DMatrix::zeros(n, m);
    for i in 0..n {
        for (j, &s) in grid.iter().enumerate() {
            let mut x = 0.0;
            for k in 0..6 {
                x += a_mat[(i, k)] * basis_fn(k, s);
            }
            values[(i, j)] = x;
        }
    }
    let treatment = FunctionalSample::new(grid.clone(), values)?;

    let (obs_log, delta) = if config.censor_target == 0.0 {
        (y.clone(), vec![true; n])
    } else {
        let (a, b) = calibrate_censoring(
            config.scenario,
            20_000,
            config.censor_target,
            crate::rng::derive_seed(config.seed, &[TAG_CALIBRATE]),
        )?;
        let mut crng = stream_rng(config.seed, &[TAG_CENSOR]);
        let mut obs = Vec::with_capacity(n);
        let mut del = Vec::with_capacity(n);
        for &yi in &y {
            let u: f64 = crng.gen_range(0.0..1.0);
            let log_c = (a + (b - a) * u).ln();
            del.push(yi <= log_c);
            obs.push(yi.min(log_c));
        }
        if !del.iter().any(|&d| d) {
            return Err(Error::AllCensored);
        }
        (obs, del)
    };
    let survival = SurvivalSample::from_log_times(obs_log, delta)?;
    let data = CausalDataset::new(treatment, z, survival, CausalConfig::default())?;
    Ok(SimulatedDataset {
        true_beta_curve: grid.iter().map(|&s| true_beta(s)).collect(),
        data,
        true_log_time: y,
        errors,
        w_mat,
        a_mat,
        causal_log_time: causal,
    })
}
