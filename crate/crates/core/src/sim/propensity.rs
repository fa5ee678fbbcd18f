//! Logistic propensity models with cluster effects.
//!
//! The fixed-effects fit puts one free intercept per cluster; a ridge of
//! `FIXED_RIDGE` on those intercepts keeps the fit finite when a cluster
//! has all or none of its units selected. The random-intercept fit uses
//! penalized quasi-likelihood: Newton steps on the penalized likelihood
//! at the current `σ²`, then `σ² = Σ bᵢ² / (k − tr H⁻¹_bb / σ²)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SoftcalError};
use crate::frame::PopulationFrame;
use crate::linalg;

pub const FIXED_RIDGE: f64 = 1e-6;
const MAX_NEWTON: usize = 100;
const MAX_OUTER: usize = 200;
const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    /// Fitted probability for every frame row.
    pub prob: DVector<f64>,
    pub iterations: usize,
    /// Random-intercept variance; `None` for the fixed-effects fit.
    pub sigma2: Option<f64>,
    /// Inverse penalized information at the optimum.
    pub cov: DMatrix<f64>,
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Maximizes `Σ d [δη − log(1+eᶯ)] − ½ Σ penⱼ βⱼ²` from `start`.
pub fn penalized_logistic(
    x: &DMatrix<f64>,
    delta: &[bool],
    d: &DVector<f64>,
    pen: &DVector<f64>,
    start: DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    let objective = |b: &DVector<f64>| -> f64 {
        let eta = x * b;
        let ll: f64 = (0..x.nrows())
            .map(|i| d[i] * (if delta[i] { eta[i] } else { 0.0 } - log1pexp(eta[i])))
            .sum();
        ll - 0.5 * pen.component_mul(b).dot(b)
    };
    let mut beta = start;
    let mut obj = objective(&beta);
    for it in 0..MAX_NEWTON {
        let eta = x * &beta;
        let p = eta.map(sigmoid);
        let resid = DVector::from_fn(x.nrows(), |i, _| d[i] * (if delta[i] { 1.0 } else { 0.0 } - p[i]));
        let grad = x.tr_mul(&resid) - pen.component_mul(&beta);
        let w = DVector::from_fn(x.nrows(), |i, _| d[i] * p[i] * (1.0 - p[i]));
        let mut h = linalg::weighted_gram(x, &w);
        for j in 0..h.nrows() {
            h[(j, j)] += pen[j];
        }
        if linalg::max_abs(&grad) < 1e-10 * (1.0 + d.sum()) {
            let cov = linalg::pinv(&h, linalg::DEFAULT_PINV_TOL).0;
            return Ok((beta, cov, it));
        }
        let step = linalg::solve_psd(&h, &grad, linalg::DEFAULT_PINV_TOL);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let co = objective(&cand);
            if co.is_finite() && co >= obj - 1e-14 * (1.0 + obj.abs()) {
                beta = cand;
                obj = co;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || linalg::max_abs(&(&step * t)) < 1e-12 {
            let cov = linalg::pinv(&h, linalg::DEFAULT_PINV_TOL).0;
            return Ok((beta, cov, it + 1));
        }
    }
    Err(SoftcalError::NotConverged("logistic propensity fit"))
}

/// Columns of `x1` after the intercept, followed by the cluster dummies.
fn fixed_design(frame: &PopulationFrame) -> DMatrix<f64> {
    let (n, p, q) = (frame.n_total(), frame.p(), frame.q());
    let mut x = DMatrix::zeros(n, p - 1 + q);
    x.view_mut((0, 0), (n, p - 1)).copy_from(&frame.x1.columns(1, p - 1));
    x.view_mut((0, p - 1), (n, q)).copy_from(&frame.x2);
    x
}

/// Logistic model with a free intercept per cluster.
pub fn fit_fixed(frame: &PopulationFrame) -> Result<LogisticFit> {
    let x = fixed_design(frame);
    let p = frame.p();
    let pen = DVector::from_fn(x.ncols(), |j, _| if j < p - 1 { 0.0 } else { FIXED_RIDGE });
    let (coef, cov, iterations) =
        penalized_logistic(&x, &frame.delta, &frame.design_weight, &pen, DVector::zeros(x.ncols()))?;
    let prob = (&x * &coef).map(sigmoid);
    Ok(LogisticFit {
        coef,
        prob,
        iterations,
        sigma2: None,
        cov,
    })
}

/// Logistic random-intercept model fitted by penalized quasi-likelihood.
pub fn fit_random(frame: &PopulationFrame) -> Result<LogisticFit> {
    let (n, p, q) = (frame.n_total(), frame.p(), frame.q());
    let mut x = DMatrix::zeros(n, p + q);
    x.view_mut((0, 0), (n, p)).copy_from(&frame.x1);
    x.view_mut((0, p), (n, q)).copy_from(&frame.x2);
    let mut sigma2 = 1.0f64;
    let mut coef = DVector::zeros(p + q);
    let mut total_iter = 0;
    for _ in 0..MAX_OUTER {
        let pen = DVector::from_fn(p + q, |j, _| if j < p { 0.0 } else { 1.0 / sigma2 });
        let (c, cov, it) = penalized_logistic(&x, &frame.delta, &frame.design_weight, &pen, coef)?;
        coef = c;
        total_iter += it;
        let b = coef.rows(p, q);
        let tr: f64 = (p..p + q).map(|j| cov[(j, j)]).sum();
        // effective degrees of freedom of the random intercepts
        let edf = q as f64 - tr / sigma2;
        let next = if edf > 1e-12 {
            (b.dot(&b) / edf).max(SIGMA2_FLOOR)
        } else {
            SIGMA2_FLOOR
        };
        let done = (next.ln() - sigma2.ln()).abs() < 1e-8 || (next - sigma2).abs() < 1e-8;
        sigma2 = next;
        if done || sigma2 <= SIGMA2_FLOOR {
            let prob = (&x * &coef).map(sigmoid);
            return Ok(LogisticFit {
                coef,
                prob,
                iterations: total_iter,
                sigma2: Some(sigma2),
                cov,
            });
        }
    }
    Err(SoftcalError::NotConverged("random-intercept propensity fit"))
}

/// Hájek mean `Σ dδy/p̂ / Σ dδ/p̂` with influence values
/// `ψ = θ + N δ (y − θ) / (p̂ Ŝ)`, `Ŝ = Σ dδ/p̂`, so that `N⁻¹ Σ dψ = θ`.
/// The estimated propensity is treated as fixed.
pub fn hajek(frame: &PopulationFrame, prob: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let n = frame.n_total();
    let mut s = 0.0;
    let mut num = 0.0;
    for i in 0..n {
        if frame.delta[i] {
            let y = frame.y[i].ok_or(SoftcalError::InvalidFrame(format!("y missing at selected row {i}")))?;
            let w = frame.design_weight[i] / prob[i];
            s += w;
            num += w * y;
        }
    }
    if s == 0.0 {
        return Err(SoftcalError::EmptySample);
    }
    let theta = num / s;
    let big_n = frame.pop_size();
    let psi = DVector::from_fn(n, |i, _| match (frame.delta[i], frame.y[i]) {
        (true, Some(y)) => theta + big_n * (y - theta) / (prob[i] * s),
        _ => theta,
    });
    Ok((theta, psi))
}
