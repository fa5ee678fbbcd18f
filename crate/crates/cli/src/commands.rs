use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use softcal::calibrate::{soft_calibrate, MixedEffectsSpec, SolveResult, SolverOptions};
use softcal::cluster::{
    build_cluster_targets, causal_ate, cluster_report, ArmGamma, CausalFrame, ClusterDesign,
};
use softcal::estimate::{report_from_solve, EstimateOptions, EstimateReport, V2Policy};
use softcal::frame::read_csv;
use softcal::sim::{run_monte_carlo, ScenarioConfig};
use softcal::tune::{select_gamma, TuneOptions, TuneResult};
use softcal::{validate_frame, LossSpec, PopulationFrame, SoftcalError};

use crate::output::{fmt_f64, InputFile, Run};
use crate::{
    loss_spec, Command, EstimateArgs, FitArgs, GammaArg, SimulateArgs, TuneArgs, V2Arg, ValidateArgs, Failure,
    EXIT_DATA, EXIT_SOLVER, EXIT_USAGE,
};

type Outcome = Result<u8, Failure>;

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Calibrate(a) => calibrate(&a),
        Command::Estimate(a) => estimate(&a),
        Command::Tune(a) => tune(&a),
        Command::Ate(a) => ate(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Validate(a) => validate(&a),
    }
}

/// A parsed input file.
struct Loaded {
    input: InputFile,
    frame: PopulationFrame,
    design: Option<ClusterDesign>,
    treatment: Option<Vec<bool>>,
}

/// Reads the CSV; `fully_observed` fills `delta` with ones when absent.
fn load(path: &Path, fully_observed: bool) -> Result<Loaded, Failure> {
    let (input, bytes) = InputFile::read(path)?;
    let table = read_csv(&bytes[..])?;
    let n = table.y.len();
    let delta = match (&table.delta, fully_observed) {
        (Some(d), _) => d.clone(),
        (None, true) => vec![true; n],
        (None, false) => return Err(SoftcalError::Csv("missing column `delta`".into()).into()),
    };
    let (frame, design) = match (&table.cluster, &table.d_i, &table.n_pop_i) {
        (Some(c), Some(d), Some(big)) => {
            if table.x2.ncols() > 0 {
                return Err(SoftcalError::Csv("cluster samples take x2 from `cluster`; drop the `x2_*` columns".into()).into());
            }
            let design = ClusterDesign::from_rows(c, d, big)?;
            let mut f = design.frame(table.x1.clone(), table.y.clone(), delta)?;
            if let Some(q) = &table.q {
                f = f.with_q_scale(nalgebra::DVector::from_column_slice(q))?;
            }
            (f, Some(design))
        }
        (None, None, None) => {
            let mut t = table.clone();
            t.delta = Some(delta);
            (t.to_frame()?, None)
        }
        _ => return Err(SoftcalError::Csv("`cluster`, `d_i` and `N_i` must appear together".into()).into()),
    };
    Ok(Loaded {
        input,
        frame,
        design,
        treatment: table.treatment,
    })
}

fn solver(max_iter: usize) -> SolverOptions {
    SolverOptions {
        max_iter,
        ..SolverOptions::default()
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        kind: "invalid_option",
        message: msg,
    }
}

fn check_folds(folds: usize) -> Result<(), Failure> {
    if folds < 2 {
        Err(usage(format!("--folds must be >= 2, got {folds}")))
    } else {
        Ok(())
    }
}

fn check_level(level: f64) -> Result<(), Failure> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--level must lie in (0, 1), got {level}")))
    }
}

fn tune_options(folds: usize, seed: u64, max_iter: usize) -> TuneOptions {
    TuneOptions {
        folds,
        seed,
        solver: solver(max_iter),
        ..TuneOptions::default()
    }
}

/// `index,weight` over selected frame rows.
fn weights_csv(solve: &SolveResult) -> String {
    let mut s = String::from("index,weight\n");
    for (k, &i) in solve.sample_index.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_f64(solve.weights[k]));
    }
    s
}

fn solve_summary(solve: &SolveResult) -> serde_json::Value {
    json!({
        "converged": solve.converged,
        "iterations": solve.iterations,
        "grad_norm": solve.grad_norm,
        "max_residual": solve.max_residual(),
        "c_hat": solve.c_hat.as_slice(),
    })
}

struct Fitted {
    loss: LossSpec,
    spec: MixedEffectsSpec,
    tune: Option<TuneResult>,
    targets: softcal::calibrate::SoftTargets,
    solve: SolveResult,
}

/// Resolves `γ` (tuning when asked) and solves. A non-converged solve is
/// returned for the caller to report.
fn fit(a: &FitArgs, data: &Loaded) -> Result<Fitted, Failure> {
    check_folds(a.folds)?;
    let loss = loss_spec(a.loss, a.bounds)?;
    data.frame.ensure_valid()?;
    let base = MixedEffectsSpec::identity(data.frame.q(), 1.0);
    let (gamma, tune) = match a.gamma {
        GammaArg::Value(g) => (g, None),
        GammaArg::Auto => {
            let r = select_gamma(&data.frame, &loss, &base, &tune_options(a.folds, a.common.seed, a.max_iter))?;
            (r.gamma_selected, Some(r))
        }
    };
    let spec = base.with_gamma(gamma);
    let opts = solver(a.max_iter);
    let (targets, solve) = match &data.design {
        Some(design) => {
            let t = build_cluster_targets(&data.frame, design, &spec)?;
            let s = softcal::calibrate::solve_newton(&data.frame, &loss, &t, &opts)?;
            (t, s)
        }
        None => soft_calibrate(&data.frame, &loss, &spec, &opts)?,
    };
    Ok(Fitted {
        loss,
        spec,
        tune,
        targets,
        solve,
    })
}

fn exit_for(converged: bool) -> u8 {
    if converged {
        0
    } else {
        eprintln!("{}", json!({"error": "solver", "message": "solve did not converge; best iterate written", "exit_code": EXIT_SOLVER}));
        EXIT_SOLVER
    }
}

fn calibrate(a: &FitArgs) -> Outcome {
    let start = Instant::now();
    let data = load(&a.input, false)?;
    let f = fit(a, &data)?;
    let mut run = Run::new(&a.common.out, "calibrate", vec![data.input.clone()], a, a.common.seed)?;
    run.csv("weights.csv", &weights_csv(&f.solve));
    run.json(
        "calibrate.json",
        &json!({
            "loss": f.loss.label(),
            "gamma": f.spec.gamma,
            "tune": f.tune,
            "solve": solve_summary(&f.solve),
        }),
    )?;
    let converged = f.solve.converged;
    run.finish(converged, start.elapsed().as_secs_f64())?;
    Ok(exit_for(converged))
}

fn report_json(r: &EstimateReport, n: usize) -> serde_json::Value {
    json!({
        "method": r.method,
        "theta": r.theta,
        "v1": r.v1,
        "v2": r.v2,
        "var_theta": r.var_theta(n),
        "ci_low": r.ci_low,
        "ci_high": r.ci_high,
        "level": r.level,
        "gamma": r.gamma,
        "converged": r.converged,
    })
}

fn estimate(a: &EstimateArgs) -> Outcome {
    let start = Instant::now();
    check_level(a.fit.level)?;
    let data = load(&a.fit.input, false)?;
    let f = fit(&a.fit, &data)?;
    let mut run = Run::new(&a.fit.common.out, "estimate", vec![data.input.clone()], a, a.fit.common.seed)?;
    run.csv("weights.csv", &weights_csv(&f.solve));
    if !f.solve.converged {
        run.json("estimate.json", &json!({"loss": f.loss.label(), "solve": solve_summary(&f.solve)}))?;
        run.finish(false, start.elapsed().as_secs_f64())?;
        return Ok(exit_for(false));
    }
    let method = format!("{}_{}", if f.spec.gamma == 0.0 { "hard" } else { "soft" }, f.loss.family.code());
    let (report, n) = match &data.design {
        Some(design) => (
            cluster_report(&data.frame, design, &f.solve, &f.targets, &method, a.fit.level)?,
            design.n(),
        ),
        None => {
            let opts = EstimateOptions {
                level: a.fit.level,
                v2: match a.v2 {
                    V2Arg::Include => V2Policy::Include,
                    V2Arg::Omit => V2Policy::Omit,
                },
            };
            (report_from_solve(&data.frame, &f.solve, &f.targets, &method, &opts)?, data.frame.n_sample())
        }
    };
    run.json(
        "estimate.json",
        &json!({
            "loss": f.loss.label(),
            "report": report_json(&report, n),
            "tune": f.tune,
            "solve": solve_summary(&f.solve),
        }),
    )?;
    run.finish(true, start.elapsed().as_secs_f64())?;
    Ok(0)
}

fn tune(a: &TuneArgs) -> Outcome {
    let start = Instant::now();
    check_folds(a.folds)?;
    let loss = loss_spec(a.loss, a.bounds)?;
    let data = load(&a.input, false)?;
    data.frame.ensure_valid()?;
    let spec = MixedEffectsSpec::identity(data.frame.q(), 1.0);
    let r = select_gamma(&data.frame, &loss, &spec, &tune_options(a.folds, a.common.seed, a.max_iter))?;
    let mut run = Run::new(&a.common.out, "tune", vec![data.input.clone()], a, a.common.seed)?;
    run.json("tune.json", &json!({"loss": loss.label(), "result": r}))?;
    run.finish(true, start.elapsed().as_secs_f64())?;
    Ok(0)
}

fn ate(a: &FitArgs) -> Outcome {
    let start = Instant::now();
    check_folds(a.folds)?;
    check_level(a.level)?;
    let loss = loss_spec(a.loss, a.bounds)?;
    let data = load(&a.input, true)?;
    let design = data
        .design
        .as_ref()
        .ok_or_else(|| Failure::from(SoftcalError::Csv("ate needs `cluster`, `d_i` and `N_i` columns".into())))?;
    let treatment = data
        .treatment
        .clone()
        .ok_or_else(|| Failure::from(SoftcalError::Csv("ate needs a treatment column `A`".into())))?;
    let gamma = match a.gamma {
        GammaArg::Value(g) => ArmGamma::Fixed { treated: g, control: g },
        GammaArg::Auto => ArmGamma::Tuned(tune_options(a.folds, a.common.seed, a.max_iter)),
    };
    let spec = MixedEffectsSpec::identity(data.frame.q(), 1.0);
    let r = causal_ate(
        &data.frame,
        &CausalFrame { treatment },
        design,
        &spec,
        &loss,
        &gamma,
        &solver(a.max_iter),
        a.level,
    )?;
    let mut run = Run::new(&a.common.out, "ate", vec![data.input.clone()], a, a.common.seed)?;
    run.json(
        "ate.json",
        &json!({
            "loss": loss.label(),
            "report": report_json(&r.report, design.n()),
            "theta_treated": r.theta_treated,
            "theta_control": r.theta_control,
            "gamma_treated": r.gamma_treated,
            "gamma_control": r.gamma_control,
        }),
    )?;
    run.finish(r.report.converged, start.elapsed().as_secs_f64())?;
    Ok(0)
}

#[derive(Serialize)]
struct SimOptions<'a> {
    args: &'a SimulateArgs,
    scenario: &'a ScenarioConfig,
}

fn simulate(a: &SimulateArgs) -> Outcome {
    let start = Instant::now();
    let (input, bytes) = InputFile::read(&a.config)?;
    let mut cfg: ScenarioConfig = serde_json::from_slice(&bytes).map_err(|e| Failure {
        code: EXIT_DATA,
        kind: "data",
        message: format!("scenario {}: {e}", a.config.display()),
    })?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.workers == 0 {
        return Err(usage("--workers must be >= 1".into()));
    }
    cfg.validate().map_err(|e| Failure {
        code: EXIT_DATA,
        kind: "data",
        message: e.to_string(),
    })?;
    let table = run_monte_carlo(&cfg, a.workers)?;
    let mut run = Run::new(&a.out, "simulate", vec![input], &SimOptions { args: a, scenario: &cfg }, cfg.seed)?;
    run.csv("metrics.csv", &table.to_csv());
    run.json(
        "simulate.json",
        &json!({
            "reps": table.reps,
            "used": table.used,
            "failures": table.failures,
            "rows": table.rows,
            "replicates": table.replicates,
        }),
    )?;
    run.finish(true, start.elapsed().as_secs_f64())?;
    Ok(0)
}

fn validate(a: &ValidateArgs) -> Outcome {
    let start = Instant::now();
    let data = load(&a.input, false)?;
    let report = validate_frame(&data.frame);
    let mut run = Run::new(&a.common.out, "validate", vec![data.input.clone()], a, a.common.seed)?;
    run.json("validation.json", &json!({"passed": report.passed(), "report": report}))?;
    run.finish(true, start.elapsed().as_secs_f64())?;
    if report.passed() {
        Ok(0)
    } else {
        let first = report.failures[0].to_string();
        eprintln!("{}", json!({"error": "data", "message": format!("frame invalid: {first}"), "exit_code": EXIT_DATA}));
        Ok(EXIT_DATA)
    }
}
