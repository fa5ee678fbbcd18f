mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Serialize, Serializer};
use softcal::{LossFamily, LossSpec, SoftcalError};

/// Soft calibration weighting from the command line.
#[derive(Debug, Parser)]
#[command(name = "softcal", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for calibration weights and write weights.csv.
    Calibrate(FitArgs),
    /// Point estimate, variance and interval.
    Estimate(EstimateArgs),
    /// Cross-fitted choice of gamma over the grid around the REML seed.
    Tune(TuneArgs),
    /// Average treatment effect on a fully observed cluster sample.
    Ate(FitArgs),
    /// Monte Carlo study from a JSON scenario.
    Simulate(SimulateArgs),
    /// Check the frame invariants of an input file.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossArg {
    Sq,
    Ent,
    El,
    Me,
    Logit,
    Trunc,
}

impl LossArg {
    fn family(self) -> LossFamily {
        match self {
            Self::Sq => LossFamily::Square,
            Self::Ent => LossFamily::EntropyDivergence,
            Self::El => LossFamily::EmpiricalLikelihood,
            Self::Me => LossFamily::MaximumEntropy,
            Self::Logit => LossFamily::BoundedLogistic,
            Self::Trunc => LossFamily::TruncatedLinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaArg {
    Auto,
    Value(f64),
}

impl Serialize for GammaArg {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Value(v) => s.serialize_f64(*v),
        }
    }
}

fn parse_gamma(s: &str) -> Result<GammaArg, String> {
    if s == "auto" {
        return Ok(GammaArg::Auto);
    }
    let v: f64 = s.parse().map_err(|_| format!("expected `auto` or a number, got `{s}`"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(GammaArg::Value(v))
    } else {
        Err(format!("gamma must be finite and >= 0, got {v}"))
    }
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let (l, u) = s.split_once(',').ok_or_else(|| format!("expected `L,U`, got `{s}`"))?;
    let p = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("cannot parse bound `{t}`"));
    Ok((p(l)?, p(u)?))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory for artifacts and manifest.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for fold assignment and simulation; falls back to SOFTCAL_SEED.
    #[arg(long, env = "SOFTCAL_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// CSV with `delta`, `y`, optional `q`, `x1_*`, `x2_*`; cluster samples
    /// add `cluster`, `d_i`, `N_i` and take the cluster dummies as `x2`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub loss: LossArg,
    /// Weight bounds `L,U` for logit and trunc.
    #[arg(long, value_parser = parse_bounds)]
    pub bounds: Option<(f64, f64)>,
    /// `auto` tunes by cross-fitting; a number is used as given.
    #[arg(long, value_parser = parse_gamma, default_value = "auto")]
    pub gamma: GammaArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Interval level for reports.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum V2Arg {
    Include,
    Omit,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Whether the second variance component enters the interval.
    #[arg(long, value_enum, default_value = "include")]
    pub v2: V2Arg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuneArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub loss: LossArg,
    #[arg(long, value_parser = parse_bounds)]
    pub bounds: Option<(f64, f64)>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON; omitted fields take the desk-scale defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Replicate threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the scenario seed; falls back to SOFTCAL_SEED.
    #[arg(long, env = "SOFTCAL_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn loss_spec(loss: LossArg, bounds: Option<(f64, f64)>) -> Result<LossSpec, SoftcalError> {
    LossSpec::new(loss.family(), bounds)
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_SOLVER: u8 = 2;
pub const EXIT_DATA: u8 = 3;

impl From<SoftcalError> for Failure {
    fn from(e: SoftcalError) -> Self {
        use SoftcalError::*;
        let (code, kind) = match &e {
            InvalidSpec(_) => (EXIT_USAGE, "invalid_option"),
            NotConverged(_) | Infeasible { .. } | CrossFit { .. } | TooManyFailures { .. } | UnitDomain { .. } => {
                (EXIT_SOLVER, "solver")
            }
            LossDomain { .. } | ConjugateDomain { .. } => (EXIT_SOLVER, "solver"),
            InvalidFrame(_) | EmptySample | DimensionMismatch { .. } | Singular { .. } | TooFewClusters(_) | Design(_)
            | EmptyArm(_) | Csv(_) | Io(_) => (EXIT_DATA, "data"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self {
            code: EXIT_DATA,
            kind: "io",
            message: format!("{e:#}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let msg = serde_json::json!({"error": f.kind, "message": f.message, "exit_code": f.code});
            eprintln!("{msg}");
            ExitCode::from(f.code)
        }
    }
}
