//! Point estimators, influence values and variance estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibrate::{
    hard_targets, penalized_gram, soft_calibrate, DualSystem, MixedEffectsSpec, SoftTargets, SolveResult,
    SolverOptions,
};
use crate::error::{Result, SoftcalError};
use crate::frame::{sample_view, PopulationFrame};
use crate::linalg::{self, DEFAULT_PINV_TOL};
use crate::loss::LossSpec;

/// `θ̂_w = N⁻¹ Σ_S dᵢ wᵢ yᵢ` with `weights` aligned to the sample rows.
pub fn weighted_mean(frame: &PopulationFrame, weights: &DVector<f64>) -> Result<f64> {
    let sv = sample_view(frame)?;
    if weights.len() != sv.index.len() {
        return Err(SoftcalError::DimensionMismatch {
            what: "weights",
            expected: sv.index.len(),
            got: weights.len(),
        });
    }
    Ok(sv.d.component_mul(weights).dot(&sv.y) / frame.pop_size())
}

/// Solution `(β̂, û)` of the penalized mixed-model equations.
#[derive(Debug, Clone, PartialEq)]
pub struct BlupFit {
    pub beta_hat: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub gamma: f64,
}

impl BlupFit {
    /// `x1ᵢᵀβ̂ + x2ᵢᵀû` for every frame row.
    pub fn predict(&self, frame: &PopulationFrame) -> DVector<f64> {
        &frame.x1 * &self.beta_hat + &frame.x2 * &self.u_hat
    }

    /// `N⁻¹ Σ_U dᵢ (x1ᵢᵀβ̂ + x2ᵢᵀû)`.
    pub fn mean(&self, frame: &PopulationFrame) -> f64 {
        self.predict(frame).dot(&frame.design_weight) / frame.pop_size()
    }
}

/// Solves `C (β, u) = Σ_S dqxy` with `C` the penalized sample Gram.
pub fn blup_solve(frame: &PopulationFrame, spec: &MixedEffectsSpec) -> Result<BlupFit> {
    spec.validate(frame.q())?;
    let p = frame.p();
    let c = penalized_gram(frame, spec)?;
    let sv = sample_view(frame)?;
    let rhs = sv.x_full().tr_mul(&sv.d.component_mul(&sv.q).component_mul(&sv.y));
    let ch = linalg::cholesky_checked(&c, DEFAULT_PINV_TOL).ok_or_else(|| SoftcalError::Singular {
        what: "mixed-model system",
        rank: linalg::rank(&c, DEFAULT_PINV_TOL),
        dim: c.nrows(),
    })?;
    let sol = ch.solve(&rhs);
    Ok(BlupFit {
        beta_hat: sol.rows(0, p).into_owned(),
        u_hat: sol.rows(p, frame.q()).into_owned(),
        gamma: spec.gamma,
    })
}

/// `x_SC = (x1, M_Sᵀx1 + (I + R_Sᵀ)x2)` for every frame row, as rows.
pub fn soft_covariates(frame: &PopulationFrame, targets: &SoftTargets) -> DMatrix<f64> {
    let (n, p, q) = (frame.n_total(), frame.p(), frame.q());
    let adj2 = &frame.x1 * &targets.m_s + &frame.x2 * (DMatrix::identity(q, q) + &targets.r_s);
    let mut x = DMatrix::zeros(n, p + q);
    x.view_mut((0, 0), (n, p)).copy_from(&frame.x1);
    x.view_mut((0, p), (n, q)).copy_from(&adj2);
    x
}

/// `B = {Σ dδw' x y}ᵀ{Σ dδw' x xᵀ}⁻¹`, using the pseudo-inverse when the
/// weighted Gram is singular.
pub fn regression_b(frame: &PopulationFrame, solve: &SolveResult) -> Result<DVector<f64>> {
    let sv = sample_view(frame)?;
    if sv.index != solve.sample_index {
        return Err(SoftcalError::DimensionMismatch {
            what: "solve sample",
            expected: sv.index.len(),
            got: solve.sample_index.len(),
        });
    }
    let xs = sv.x_full();
    let s = sv.d.component_mul(&solve.weight_derivs);
    let gram = linalg::weighted_gram(&xs, &s);
    let xy = xs.tr_mul(&s.component_mul(&sv.y));
    Ok(linalg::solve_psd(&gram, &xy, DEFAULT_PINV_TOL))
}

/// Ridge version of `B` for the penalized comparator: the `x2` block of the
/// Gram gets `N λ` added, matching the dual Hessian.
pub fn regression_b_ridge(frame: &PopulationFrame, solve: &SolveResult, lambda: f64) -> Result<DVector<f64>> {
    let sv = sample_view(frame)?;
    let xs = sv.x_full();
    let s = sv.d.component_mul(&solve.weight_derivs);
    let mut gram = linalg::weighted_gram(&xs, &s);
    let big_n = frame.pop_size();
    for j in frame.p()..frame.p() + frame.q() {
        gram[(j, j)] += big_n * lambda;
    }
    let xy = xs.tr_mul(&s.component_mul(&sv.y));
    Ok(linalg::solve_psd(&gram, &xy, DEFAULT_PINV_TOL))
}

/// `ψᵢ = B̃xᵢ + δᵢwᵢ(yᵢ − B̃xᵢ)` with the ridge `B̃` of [`regression_b_ridge`].
pub fn l2_influence(frame: &PopulationFrame, solve: &SolveResult, lambda: f64) -> Result<Influence> {
    if !solve.converged {
        return Err(SoftcalError::NotConverged("influence values"));
    }
    let b = regression_b_ridge(frame, solve, lambda)?;
    let x = frame.x_full();
    let mut psi = &x * &b;
    for (k, &i) in solve.sample_index.iter().enumerate() {
        let y = frame.y[i].unwrap_or(f64::NAN);
        psi[i] += solve.weights[k] * (y - psi[i]);
    }
    Ok(Influence {
        psi,
        b,
        gram_term: DVector::zeros(frame.n_total()),
    })
}

/// Influence values over the frame and the regression vector `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Influence {
    pub psi: DVector<f64>,
    pub b: DVector<f64>,
    /// Uncentered sample-Gram term `κᵢ` per frame row; zero off the sample
    /// and for hard targets.
    pub gram_term: DVector<f64>,
}

/// `κᵢ = δᵢ qᵢ (xᵢᵀh)(xᵢᵀv)` with `h = C⁻¹ Σ_U d x` and
/// `v = −(M_S; R_S) B₂`.
///
/// The soft targets are `G C⁻¹ Σ_U d x`, where `G` is the selected-sample
/// Gram and `C = G + γ P`; `κ` is their first-order response to the
/// contribution `dᵢ δᵢ qᵢ xᵢxᵢᵀ` of one row to `G`.
pub fn gram_term(frame: &PopulationFrame, targets: &SoftTargets, b: &DVector<f64>) -> DVector<f64> {
    let n = frame.n_total();
    let Some(panels) = targets.panels.as_ref().filter(|_| targets.gamma > 0.0 && frame.q() > 0) else {
        return DVector::zeros(n);
    };
    let (p, q) = (frame.p(), frame.q());
    let x = frame.x_full();
    let h = panels.assemble() * x.tr_mul(&frame.design_weight);
    let b2 = b.rows(p, q);
    let mut v = DVector::zeros(p + q);
    v.rows_mut(0, p).copy_from(&(-(&targets.m_s * &b2)));
    v.rows_mut(p, q).copy_from(&(-(&targets.r_s * &b2)));
    let xh = &x * &h;
    let xv = &x * &v;
    DVector::from_fn(n, |i, _| if frame.delta[i] { frame.q_scale[i] * xh[i] * xv[i] } else { 0.0 })
}

/// `ψᵢ = B x_SC,ᵢ + δᵢ wᵢ (yᵢ − B xᵢ) + κᵢ − κ̄` for every frame row,
/// with `κ̄ = N⁻¹ Σ dκ`.
///
/// At a converged solve `N⁻¹ Σ dᵢ ψᵢ = θ̂_w`.
pub fn influence_values(frame: &PopulationFrame, solve: &SolveResult, targets: &SoftTargets) -> Result<Influence> {
    if !solve.converged {
        return Err(SoftcalError::NotConverged("influence values"));
    }
    let b = regression_b(frame, solve)?;
    let xsc = soft_covariates(frame, targets);
    let mut psi = &xsc * &b;
    let x = frame.x_full();
    for (k, &i) in solve.sample_index.iter().enumerate() {
        let y = frame.y[i].unwrap_or(f64::NAN);
        let eta = y - x.row(i).transpose().dot(&b);
        psi[i] += solve.weights[k] * eta;
    }
    let kappa = gram_term(frame, targets, &b);
    let kbar = kappa.dot(&frame.design_weight) / frame.pop_size();
    psi += kappa.add_scalar(-kbar);
    Ok(Influence { psi, b, gram_term: kappa })
}

/// `β̂ = D11 Σ dq x1 y + D12 Σ dq x2 y`; falls back to the pseudo-inverse
/// of the Gram when the targets carry no panels.
pub fn beta_hat(frame: &PopulationFrame, targets: &SoftTargets) -> Result<DVector<f64>> {
    let sv = sample_view(frame)?;
    let p = frame.p();
    let xs = sv.x_full();
    let rhs = xs.tr_mul(&sv.d.component_mul(&sv.q).component_mul(&sv.y));
    match &targets.panels {
        Some(pn) => Ok(&pn.d11 * rhs.rows(0, p) + &pn.d12 * rhs.rows(p, frame.q())),
        None => {
            let g = linalg::weighted_gram(&xs, &sv.d.component_mul(&sv.q));
            let full = linalg::pinv(&g, DEFAULT_PINV_TOL).0 * rhs;
            Ok(full.rows(0, p).into_owned())
        }
    }
}

/// `(V̂₁, V̂₂)` on the `√n` scale:
/// `V̂₁ = n N⁻² Σ_S d² (wη + κ)²`, `V̂₂ = n N⁻² Σ_S d w (y − x1ᵀβ̂)²`,
/// with `κ` the sample-Gram term of [`gram_term`].
pub fn variance_estimates(frame: &PopulationFrame, solve: &SolveResult, targets: &SoftTargets) -> Result<(f64, f64)> {
    if !solve.converged {
        return Err(SoftcalError::NotConverged("variance estimates"));
    }
    let b = regression_b(frame, solve)?;
    let beta = beta_hat(frame, targets)?;
    let kappa = gram_term(frame, targets, &b);
    let sv = sample_view(frame)?;
    let xs = sv.x_full();
    let eta = &sv.y - &xs * &b;
    let e2 = &sv.y - &sv.x1 * &beta;
    let n = sv.index.len() as f64;
    let big_n = frame.pop_size();
    let mut v1 = 0.0;
    let mut v2 = 0.0;
    for k in 0..sv.index.len() {
        let w = solve.weights[k];
        let a = sv.d[k] * (w * eta[k] + kappa[sv.index[k]]);
        v1 += a * a;
        v2 += sv.d[k] * w * e2[k] * e2[k];
    }
    let scale = n / (big_n * big_n);
    Ok((scale * v1, (scale * v2).max(0.0)))
}

/// `θ̂_bc = θ̂_w − N⁻¹ Σ_U dᵢ(δᵢwᵢ − 1)μ̂ᵢ`.
pub fn bias_corrected(frame: &PopulationFrame, solve: &SolveResult, mu_hat: &DVector<f64>) -> Result<f64> {
    if mu_hat.len() != frame.n_total() {
        return Err(SoftcalError::DimensionMismatch {
            what: "mu_hat",
            expected: frame.n_total(),
            got: mu_hat.len(),
        });
    }
    let theta = weighted_mean(frame, &solve.weights)?;
    let w = solve.frame_weights(frame.n_total());
    let corr: f64 = (0..frame.n_total())
        .map(|i| frame.design_weight[i] * (w[i] - 1.0) * mu_hat[i])
        .sum();
    Ok(theta - corr / frame.pop_size())
}

/// Influence values of `θ̂_bc`: `ψ_w + (xᵢ − x_SC,ᵢ)ᵀ(β̂, û)`, where `ψ_w`
/// are the influence values of the soft estimate the correction is applied to.
///
/// The weights meet the soft targets, so `Σ d(1 − δw)μ̂ = Σ d(x − x_SC)ᵀ(β̂, û)`
/// and `N⁻¹ Σ dψ = θ̂_bc` at a converged solve.
pub fn bias_corrected_psi(frame: &PopulationFrame, targets: &SoftTargets, psi_w: &DVector<f64>, blup: &BlupFit) -> DVector<f64> {
    let (p, q) = (frame.p(), frame.q());
    let mut coef = DVector::zeros(p + q);
    coef.rows_mut(0, p).copy_from(&blup.beta_hat);
    coef.rows_mut(p, q).copy_from(&blup.u_hat);
    psi_w + (frame.x_full() - soft_covariates(frame, targets)) * coef
}

/// Dual with exact `x1` balance and a ridge `λ‖c₂‖²/2` on the `x2` block.
///
/// The returned targets are the hard (population-mean) targets; at the
/// solution the `x2` imbalance scaled by `N⁻¹` equals `−λĉ₂`.
pub fn l2_penalized_solve(
    frame: &PopulationFrame,
    loss: &LossSpec,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(SoftTargets, SolveResult)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SoftcalError::InvalidSpec(format!("lambda must be >= 0, got {lambda}")));
    }
    let targets = hard_targets(frame)?;
    let mut sys = DualSystem::new(frame, loss, targets.t_x.clone(), targets.pop_size)?;
    sys.penalty = lambda;
    let solve = sys.solve(opts)?;
    Ok((targets, solve))
}

/// Whether `V̂₂` enters the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum V2Policy {
    Include,
    Omit,
    /// Omit when `n/N` is below the threshold.
    OmitBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub level: f64,
    pub v2: V2Policy,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            v2: V2Policy::Include,
        }
    }
}

/// Two-sided normal critical value.
pub fn normal_quantile(level: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    n.inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub theta: f64,
    pub v1: f64,
    pub v2: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub psi: DVector<f64>,
    pub method: String,
    pub converged: bool,
    pub gamma: f64,
    pub level: f64,
}

impl EstimateReport {
    /// Estimated `var(θ̂)`; the interval half-width is `z·√var`.
    pub fn var_theta(&self, n: usize) -> f64 {
        (self.v1 + self.v2) / n as f64
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

/// Builds the report for a converged solve.
pub fn report_from_solve(
    frame: &PopulationFrame,
    solve: &SolveResult,
    targets: &SoftTargets,
    method: &str,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let theta = weighted_mean(frame, &solve.weights)?;
    let inf = influence_values(frame, solve, targets)?;
    let (v1, v2) = variance_estimates(frame, solve, targets)?;
    let n = frame.n_sample();
    let include_v2 = match opts.v2 {
        V2Policy::Include => true,
        V2Policy::Omit => false,
        V2Policy::OmitBelow(t) => (n as f64 / frame.pop_size()) >= t,
    };
    let v2 = if include_v2 { v2 } else { 0.0 };
    let half = normal_quantile(opts.level) * ((v1 + v2) / n as f64).sqrt();
    Ok(EstimateReport {
        theta,
        v1,
        v2,
        ci_low: theta - half,
        ci_high: theta + half,
        psi: inf.psi,
        method: method.to_string(),
        converged: solve.converged,
        gamma: targets.gamma,
        level: opts.level,
    })
}

/// Soft calibration at `spec.gamma` followed by the report.
pub fn estimate(
    frame: &PopulationFrame,
    loss: &LossSpec,
    spec: &MixedEffectsSpec,
    solver: &SolverOptions,
    opts: &EstimateOptions,
) -> Result<EstimateReport> {
    let (targets, solve) = soft_calibrate(frame, loss, spec, solver)?;
    if !solve.converged {
        return Err(SoftcalError::NotConverged("estimate"));
    }
    let method = if spec.gamma == 0.0 {
        format!("hard_{}", loss.family.code())
    } else {
        format!("soft_{}", loss.family.code())
    };
    report_from_solve(frame, &solve, &targets, &method, opts)
}
