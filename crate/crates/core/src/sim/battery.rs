//! The estimator battery applied to one sampled frame.

use nalgebra::DVector;

use super::propensity::{fit_fixed, fit_random, hajek};
use super::EstimatorLabel;
use crate::calibrate::{hard_calibrate, soft_calibrate, MixedEffectsSpec, SoftTargets, SolveResult};
use crate::error::{Result, SoftcalError};
use crate::estimate::{bias_corrected, bias_corrected_psi, blup_solve, influence_values, l2_influence, l2_penalized_solve, weighted_mean};
use crate::frame::PopulationFrame;
use crate::loss::LossSpec;
use crate::tune::{select_gamma, select_l2_lambda, TuneOptions};

/// Point estimate with influence values over the frame rows, such that
/// `N⁻¹ Σ dψ` linearizes `θ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub theta: f64,
    pub psi: DVector<f64>,
    /// Selected `γ` (or `λ` for the ridge comparator).
    pub tuning: Option<f64>,
}

struct SoftFit {
    gamma: f64,
    targets: SoftTargets,
    solve: SolveResult,
}

fn converged(solve: &SolveResult, what: &'static str) -> Result<()> {
    if solve.converged {
        Ok(())
    } else {
        Err(SoftcalError::NotConverged(what))
    }
}

fn tuned_soft(frame: &PopulationFrame, loss: &LossSpec, tune: &TuneOptions) -> Result<SoftFit> {
    let spec = MixedEffectsSpec::identity(frame.q(), 1.0);
    let gamma = select_gamma(frame, loss, &spec, tune)?.gamma_selected;
    let (targets, solve) = soft_calibrate(frame, loss, &spec.with_gamma(gamma), &tune.solver)?;
    converged(&solve, "soft calibration")?;
    Ok(SoftFit { gamma, targets, solve })
}

fn from_solve(frame: &PopulationFrame, targets: &SoftTargets, solve: &SolveResult, tuning: Option<f64>) -> Result<Estimate> {
    Ok(Estimate {
        theta: weighted_mean(frame, &solve.weights)?,
        psi: influence_values(frame, solve, targets)?.psi,
        tuning,
    })
}

/// Unweighted mean of observed outcomes; `ψ = θ + N δ (y − θ)/(d n_obs)`.
pub fn simple_mean(frame: &PopulationFrame) -> Result<Estimate> {
    let obs: Vec<f64> = frame.sample_indices().iter().filter_map(|&i| frame.y[i]).collect();
    if obs.is_empty() {
        return Err(SoftcalError::EmptySample);
    }
    let m = obs.len() as f64;
    let theta = obs.iter().sum::<f64>() / m;
    let big_n = frame.pop_size();
    let psi = DVector::from_fn(frame.n_total(), |i, _| match (frame.delta[i], frame.y[i]) {
        (true, Some(y)) => theta + big_n * (y - theta) / (frame.design_weight[i] * m),
        _ => theta,
    });
    Ok(Estimate {
        theta,
        psi,
        tuning: None,
    })
}

/// Evaluates every label on a missing-data frame. The maximum-entropy
/// soft fit is shared by `soft_me` and `bc`.
pub fn run_battery(frame: &PopulationFrame, labels: &[EstimatorLabel], tune: &TuneOptions) -> Result<Vec<Estimate>> {
    let me = LossSpec::maximum_entropy();
    let mut me_fit: Option<SoftFit> = None;
    let mut out = Vec::with_capacity(labels.len());
    for &label in labels {
        let est = match label {
            EstimatorLabel::Sim => simple_mean(frame)?,
            EstimatorLabel::Fix => {
                let (theta, psi) = hajek(frame, &fit_fixed(frame)?.prob)?;
                Estimate { theta, psi, tuning: None }
            }
            EstimatorLabel::Rand => {
                let fit = fit_random(frame)?;
                let (theta, psi) = hajek(frame, &fit.prob)?;
                Estimate {
                    theta,
                    psi,
                    tuning: fit.sigma2,
                }
            }
            EstimatorLabel::Hc => {
                let (t, s) = hard_calibrate(frame, &me, &tune.solver)?;
                converged(&s, "hard calibration")?;
                from_solve(frame, &t, &s, None)?
            }
            EstimatorLabel::SoftSq => {
                let fit = tuned_soft(frame, &LossSpec::square(), tune)?;
                from_solve(frame, &fit.targets, &fit.solve, Some(fit.gamma))?
            }
            EstimatorLabel::SoftMe | EstimatorLabel::Bc => {
                if me_fit.is_none() {
                    me_fit = Some(tuned_soft(frame, &me, tune)?);
                }
                let fit = me_fit.as_ref().expect("fitted above");
                let base = from_solve(frame, &fit.targets, &fit.solve, Some(fit.gamma))?;
                if label == EstimatorLabel::SoftMe {
                    base
                } else {
                    let spec = MixedEffectsSpec::identity(frame.q(), fit.gamma);
                    let blup = blup_solve(frame, &spec)?;
                    Estimate {
                        theta: bias_corrected(frame, &fit.solve, &blup.predict(frame))?,
                        psi: bias_corrected_psi(frame, &fit.targets, &base.psi, &blup),
                        tuning: Some(fit.gamma),
                    }
                }
            }
            EstimatorLabel::L2 => {
                let lambda = select_l2_lambda(frame, &me, tune)?.lambda_selected;
                let (_, s) = l2_penalized_solve(frame, &me, lambda, &tune.solver)?;
                converged(&s, "ridge comparator")?;
                Estimate {
                    theta: weighted_mean(frame, &s.weights)?,
                    psi: l2_influence(frame, &s, lambda)?.psi,
                    tuning: Some(lambda),
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// Each label applied to the treated and control problems; `θ = θ₁ − θ₀`,
/// `ψ = ψ⁽¹⁾ − ψ⁽⁰⁾`.
pub fn run_causal_battery(
    frame: &PopulationFrame,
    treatment: &[bool],
    labels: &[EstimatorLabel],
    tune: &TuneOptions,
) -> Result<Vec<Estimate>> {
    let treated = frame.with_delta(treatment.to_vec())?;
    let control = frame.with_delta(treatment.iter().map(|a| !a).collect())?;
    let (e1, e0) = rayon::join(|| run_battery(&treated, labels, tune), || run_battery(&control, labels, tune));
    let (e1, e0) = (e1?, e0?);
    Ok(e1
        .into_iter()
        .zip(e0)
        .map(|(a, b)| Estimate {
            theta: a.theta - b.theta,
            psi: &a.psi - &b.psi,
            tuning: a.tuning,
        })
        .collect())
}
