//! Monte Carlo harness for two-stage cluster designs with
//! cluster-specific nonignorable selection.
//!
//! Each replicate draws a fresh population of `K · N_i` units, a two-stage
//! sample, and selection indicators (response or treatment), then applies
//! the requested estimators. Replicate `r` uses the ChaCha20 stream `r` of
//! the configured seed, so results do not depend on scheduling.

pub mod battery;
pub mod generate;
pub mod propensity;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_variance_from_psi, Omega};
use crate::error::{Result, SoftcalError};
use crate::estimate::normal_quantile;
use crate::tune::TuneOptions;
pub use battery::{run_battery, run_causal_battery, Estimate};
pub use generate::{gen_population, gen_selection, sample_frame, selection_prob, two_stage_sample, Population, TwoStageSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeForm {
    Linear,
    Nonlinear,
}

/// Missing outcomes, or a treatment contrast with both arms observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Missing,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorLabel {
    Sim,
    Fix,
    Rand,
    Hc,
    SoftSq,
    SoftMe,
    Bc,
    L2,
}

impl EstimatorLabel {
    pub const ALL: [EstimatorLabel; 8] = [
        Self::Sim,
        Self::Fix,
        Self::Rand,
        Self::Hc,
        Self::SoftSq,
        Self::SoftMe,
        Self::Bc,
        Self::L2,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Self::Sim => "sim",
            Self::Fix => "fix",
            Self::Rand => "rand",
            Self::Hc => "hc",
            Self::SoftSq => "soft_sq",
            Self::SoftMe => "soft_me",
            Self::Bc => "bc",
            Self::L2 => "l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub k: usize,
    pub n_i: usize,
    #[serde(rename = "K")]
    pub big_k: usize,
    #[serde(rename = "N_i")]
    pub big_n_i: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub outcome_form: OutcomeForm,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorLabel>,
    pub mode: Mode,
    /// Treatment effect added to `y(1)` in causal mode.
    pub tau: f64,
    pub folds: usize,
    pub level: f64,
}

impl Default for ScenarioConfig {
    /// Desk-scale linear design with `(λ₁, λ₂) = (0.01, 1)`.
    fn default() -> Self {
        Self {
            k: 10,
            n_i: 60,
            big_k: 500,
            big_n_i: 200,
            lambda1: 0.01,
            lambda2: 1.0,
            outcome_form: OutcomeForm::Linear,
            reps: 200,
            seed: 20240601,
            estimators: EstimatorLabel::ALL.to_vec(),
            mode: Mode::Missing,
            tau: 2.0,
            folds: 5,
            level: 0.95,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SoftcalError::InvalidSpec(m));
        if self.k > self.big_k {
            return bad(format!("k = {} exceeds K = {}", self.k, self.big_k));
        }
        if self.k < 2 {
            return bad("cluster variance needs k >= 2".into());
        }
        if self.reps == 0 {
            return bad("reps must be >= 1".into());
        }
        if self.n_i == 0 || self.n_i > self.big_n_i {
            return bad(format!("n_i = {} must lie in 1..=N_i = {}", self.n_i, self.big_n_i));
        }
        if self.estimators.is_empty() {
            return bad("no estimators requested".into());
        }
        if !(self.lambda1.is_finite() && self.lambda2.is_finite() && self.tau.is_finite()) {
            return bad("lambda1, lambda2 and tau must be finite".into());
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        Ok(())
    }
}

/// One estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub theta: f64,
    /// Cluster-level estimate of `var(θ̂)`.
    pub var_est: f64,
    pub covered: bool,
    pub tuning: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub truth: f64,
    pub records: Vec<EstimateRecord>,
}

/// Draws and evaluates replicate `rep`.
pub fn run_replicate(cfg: &ScenarioConfig, rep: usize) -> Result<ReplicateOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let (pop, truth) = gen_population(cfg, &mut rng);
    let sample = two_stage_sample(&pop, cfg, &mut rng)?;
    let delta = gen_selection(&pop, &sample.units, cfg.lambda2, &mut rng);
    let tune = TuneOptions {
        folds: cfg.folds,
        seed: rng.random(),
        proxy_loss: Some(crate::loss::LossSpec::maximum_entropy()),
        ..TuneOptions::default()
    };
    let frame = sample_frame(&pop, &sample, delta.clone())?;
    let estimates = match cfg.mode {
        Mode::Missing => run_battery(&frame, &cfg.estimators, &tune)?,
        Mode::Causal => run_causal_battery(&frame, &delta, &cfg.estimators, &tune)?,
    };
    let z = normal_quantile(cfg.level);
    let records = estimates
        .into_iter()
        .map(|e| {
            let v = cluster_variance_from_psi(&e.psi, &frame, &sample.design, &Omega::WithReplacement)?.var_theta;
            Ok(EstimateRecord {
                theta: e.theta,
                var_est: v,
                covered: (e.theta - truth).abs() <= z * v.sqrt(),
                tuning: e.tuning,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReplicateOutcome { rep, truth, records })
}

/// Summary of one estimator over the successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorMetrics {
    pub label: EstimatorLabel,
    /// Mean of `θ̂ − θ_N`.
    pub bias: f64,
    /// Sample variance of `θ̂ − θ_N` (divisor `m − 1`); `None` when `m = 1`.
    pub variance: Option<f64>,
    /// `bias² + variance·(m−1)/m`, the mean of `(θ̂ − θ_N)²`.
    pub mse: f64,
    pub coverage: f64,
    /// Mean estimated variance.
    pub mean_var_est: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<EstimatorMetrics>,
    pub reps: usize,
    /// Replicates used in the summaries.
    pub used: usize,
    pub failures: Vec<(usize, String)>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl MetricsTable {
    pub fn get(&self, label: EstimatorLabel) -> Option<&EstimatorMetrics> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One row per metric, one column per estimator.
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| format!("{v:.16e}");
        let mut s = String::from("metric");
        for r in &self.rows {
            s.push(',');
            s.push_str(r.label.code());
        }
        s.push('\n');
        let lines: [(&str, Box<dyn Fn(&EstimatorMetrics) -> String>); 5] = [
            ("bias", Box::new(|r| fmt(r.bias))),
            ("variance", Box::new(|r| r.variance.map_or_else(|| "NA".to_string(), fmt))),
            ("mse", Box::new(|r| fmt(r.mse))),
            ("coverage", Box::new(|r| fmt(r.coverage))),
            ("mean_var_est", Box::new(|r| fmt(r.mean_var_est))),
        ];
        for (name, f) in lines.iter() {
            s.push_str(name);
            for r in &self.rows {
                let _ = write!(s, ",{}", f(r));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "replicates_used{}", format!(",{}", self.used).repeat(self.rows.len()));
        s
    }
}

/// Aggregates replicate outcomes in index order.
pub fn aggregate(labels: &[EstimatorLabel], outcomes: Vec<Result<ReplicateOutcome>>) -> Result<MetricsTable> {
    let reps = outcomes.len();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > 0.05 * reps as f64 || ok.is_empty() {
        return Err(SoftcalError::TooManyFailures {
            failed: failures.len(),
            reps,
        });
    }
    let m = ok.len() as f64;
    let rows = labels
        .iter()
        .enumerate()
        .map(|(j, &label)| {
            let err: Vec<f64> = ok.iter().map(|o| o.records[j].theta - o.truth).collect();
            let bias = err.iter().sum::<f64>() / m;
            let variance = (ok.len() > 1).then(|| err.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (m - 1.0));
            let mse = bias * bias + variance.map_or(0.0, |v| v * (m - 1.0) / m);
            EstimatorMetrics {
                label,
                bias,
                variance,
                mse,
                coverage: ok.iter().filter(|o| o.records[j].covered).count() as f64 / m,
                mean_var_est: ok.iter().map(|o| o.records[j].var_est).sum::<f64>() / m,
            }
        })
        .collect();
    Ok(MetricsTable {
        rows,
        reps,
        used: ok.len(),
        failures,
        replicates: ok,
    })
}

/// Runs every replicate on a pool of `workers` threads (`0` keeps the
/// current pool) and aggregates.
pub fn run_monte_carlo(cfg: &ScenarioConfig, workers: usize) -> Result<MetricsTable> {
    cfg.validate()?;
    let go = || (0..cfg.reps).into_par_iter().map(|r| run_replicate(cfg, r)).collect::<Vec<_>>();
    let outcomes = if workers == 0 {
        go()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SoftcalError::InvalidSpec(format!("thread pool: {e}")))?
            .install(go)
    };
    aggregate(&cfg.estimators, outcomes)
}
