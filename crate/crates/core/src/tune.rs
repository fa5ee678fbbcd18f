//! Data-adaptive choice of `γ` by cross-fitted MSE over a log grid.
//!
//! The grid is centred on a restricted-likelihood estimate of
//! `σ_e²/σ_u²`. Each grid point is scored by
//!
//! ```text
//! 𝓑⁻¹ Σ_k [ (𝓑/N) Σ_{I_k} dδ w(ĉ₋ₖᵀx) y − θ̂_hc ]²
//!   + 𝓑⁻¹ Σ_k (𝓑²/N²) [ Σ_{I_k} δ(dw)²(y − B₋ₖx)² + Σ_{I_k} δ dw (y − x1ᵀβ̂₋ₖ)² ]
//! ```
//!
//! with folds a seeded random partition of frame rows.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{hard_calibrate, soft_calibrate, MixedEffectsSpec, SoftTargets, SolveResult, SolverOptions};
use crate::error::{Result, SoftcalError};
use crate::estimate::{beta_hat, l2_penalized_solve, regression_b, weighted_mean};
use crate::frame::{sample_view, PopulationFrame};
use crate::linalg;
use crate::loss::LossSpec;

/// Restricted-likelihood estimate of the variance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemlSeed {
    pub gamma: f64,
    pub sigma_e2: f64,
    pub sigma_u2: f64,
    /// Set when `σ̂_u²` sits on the boundary and `gamma` fell back to 1.
    pub boundary: bool,
}

const LOG10_LO: f64 = -8.0;
const LOG10_HI: f64 = 8.0;

struct RemlData {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    yqy: f64,
    dq_inv: DMatrix<f64>,
    n: usize,
    p: usize,
    q: usize,
}

impl RemlData {
    /// `−2 ℓ_R` up to a constant, profiled over `σ_e²`, with `σ̂_e²`.
    fn objective(&self, gamma: f64) -> (f64, f64) {
        let (p, q) = (self.p, self.q);
        let mut c = self.gram.clone();
        {
            let mut blk = c.view_mut((p, p), (q, q));
            blk += &self.dq_inv * gamma;
        }
        let Some(ch) = c.clone().cholesky() else {
            return (f64::INFINITY, f64::NAN);
        };
        let sol = ch.solve(&self.rhs);
        let ypy = (self.yqy - self.rhs.dot(&sol)).max(f64::MIN_POSITIVE);
        let dof = (self.n - p) as f64;
        let s2 = ypy / dof;
        let l = ch.l_dirty();
        let logdet: f64 = (0..p + q).map(|i| 2.0 * l[(i, i)].ln()).sum();
        (dof * s2.ln() + logdet - q as f64 * gamma.ln(), s2)
    }
}

/// Maximises the restricted likelihood of the mixed model over
/// `γ ∈ [1e-8, 1e8]` on the selected rows (ignoring design weights).
///
/// Determinant and quadratic form come from the mixed-model equations:
/// `log|H| + log|XᵀH⁻¹X| = log|C| − q log γ + const`.
pub fn reml_gamma_seed(frame: &PopulationFrame, spec: &MixedEffectsSpec) -> Result<RemlSeed> {
    let q = frame.q();
    if q == 0 {
        return Err(SoftcalError::InvalidSpec("restricted likelihood needs q >= 1".into()));
    }
    spec.validate(q)?;
    let sv = sample_view(frame)?;
    let p = frame.p();
    let n = sv.index.len();
    if n <= p {
        return Err(SoftcalError::InvalidSpec(format!("need more than {p} selected units, got {n}")));
    }
    let xs = sv.x_full();
    let data = RemlData {
        gram: linalg::weighted_gram(&xs, &sv.q),
        rhs: xs.tr_mul(&sv.q.component_mul(&sv.y)),
        yqy: sv.y.component_mul(&sv.q).dot(&sv.y),
        dq_inv: spec.d_q_inverse()?,
        n,
        p,
        q,
    };
    let f = |t: f64| data.objective(10f64.powf(t)).0;

    let steps = 32;
    let h = (LOG10_HI - LOG10_LO) / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|j| LOG10_LO + h * j as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let j = argmin_first(&vals);
    let (mut a, mut b) = (grid[j.saturating_sub(1)], grid[(j + 1).min(steps)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-9 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    let mut t_star = 0.5 * (a + b);
    if vals[j] < f(t_star) {
        t_star = grid[j];
    }
    let gamma = 10f64.powf(t_star);
    let (obj, s2) = data.objective(gamma);
    let su2 = s2 / gamma;
    let at_upper = t_star >= LOG10_HI - 1e-6;
    if !obj.is_finite() || !s2.is_finite() || at_upper || su2 <= 1e-10 {
        return Ok(RemlSeed {
            gamma: 1.0,
            sigma_e2: s2,
            sigma_u2: su2,
            boundary: true,
        });
    }
    Ok(RemlSeed {
        gamma,
        sigma_e2: s2,
        sigma_u2: su2,
        boundary: false,
    })
}

/// `{γ* × 10ʲ : j = −5, …, 5}`.
pub fn gamma_grid(star: f64) -> Vec<f64> {
    (-5..=5).map(|j| star * 10f64.powi(j)).collect()
}

/// Index of the first minimum; NaN entries never win.
pub fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Fold label of each frame row, balanced to within one row.
pub fn fold_assignment(n_rows: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n_rows];
    for (k, &i) in perm.iter().enumerate() {
        out[i] = k % folds;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub folds: usize,
    pub seed: u64,
    /// Loss for the hard-calibration proxy of `θ_N`; `None` uses the loss being tuned.
    pub proxy_loss: Option<LossSpec>,
    pub solver: SolverOptions,
    /// Evaluate grid points on the rayon pool.
    pub parallel: bool,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            proxy_loss: None,
            solver: SolverOptions::default(),
            parallel: true,
        }
    }
}

/// Cross-fitted MSE with its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossFit {
    pub mse: f64,
    pub bias_term: f64,
    pub var_term: f64,
    pub failed_folds: usize,
}

/// Scores one fitting rule by cross-fitting against `theta_proxy`.
pub fn crossfit_with<F>(
    frame: &PopulationFrame,
    loss: &LossSpec,
    fit: F,
    theta_proxy: f64,
    assignment: &[usize],
    folds: usize,
) -> Result<CrossFit>
where
    F: Fn(&PopulationFrame) -> Result<(SoftTargets, SolveResult)>,
{
    if folds < 2 {
        return Err(SoftcalError::InvalidSpec(format!("folds must be >= 2, got {folds}")));
    }
    if assignment.len() != frame.n_total() {
        return Err(SoftcalError::DimensionMismatch {
            what: "fold assignment",
            expected: frame.n_total(),
            got: assignment.len(),
        });
    }
    let big_n = frame.pop_size();
    let bf = folds as f64;
    let p = frame.p();
    let mut bias_sum = 0.0;
    let mut var_sum = 0.0;
    let mut ok = 0usize;
    for k in 0..folds {
        let train_rows: Vec<usize> = (0..frame.n_total()).filter(|&i| assignment[i] != k).collect();
        let train = frame.subset(&train_rows);
        let Some(term) = fold_term(frame, &train, loss, &fit, assignment, k, p) else {
            continue;
        };
        let (est, v1, v2) = term;
        bias_sum += (bf / big_n * est - theta_proxy).powi(2);
        var_sum += bf * bf / (big_n * big_n) * (v1 + v2);
        ok += 1;
    }
    let failed = folds - ok;
    if 2 * failed > folds || ok == 0 {
        return Err(SoftcalError::CrossFit { failed, folds });
    }
    let okf = ok as f64;
    Ok(CrossFit {
        mse: (bias_sum + var_sum) / okf,
        bias_term: bias_sum / okf,
        var_term: var_sum / okf,
        failed_folds: failed,
    })
}

/// Held-out sums for fold `k`, or `None` if the training fit fails.
fn fold_term<F>(
    frame: &PopulationFrame,
    train: &PopulationFrame,
    loss: &LossSpec,
    fit: &F,
    assignment: &[usize],
    k: usize,
    p: usize,
) -> Option<(f64, f64, f64)>
where
    F: Fn(&PopulationFrame) -> Result<(SoftTargets, SolveResult)>,
{
    let (targets, solve) = fit(train).ok()?;
    if !solve.converged {
        return None;
    }
    let b = regression_b(train, &solve).ok()?;
    let beta = beta_hat(train, &targets).ok()?;
    let (mut est, mut v1, mut v2) = (0.0, 0.0, 0.0);
    for i in (0..frame.n_total()).filter(|&i| assignment[i] == k && frame.delta[i]) {
        let x = frame.x_row(i);
        let w = loss.weight_map(x.dot(&solve.c_hat), frame.q_scale[i]).ok()?;
        let y = frame.y[i]?;
        let d = frame.design_weight[i];
        let eta = y - x.dot(&b);
        let e2 = y - x.rows(0, p).dot(&beta);
        est += d * w * y;
        v1 += (d * w).powi(2) * eta * eta;
        v2 += d * w * e2 * e2;
    }
    Some((est, v1, v2))
}

/// Hard-calibration estimate used in place of `θ_N`.
pub fn hard_proxy(frame: &PopulationFrame, loss: &LossSpec, opts: &SolverOptions) -> Result<f64> {
    let (_, s) = hard_calibrate(frame, loss, opts)?;
    if !s.converged {
        return Err(SoftcalError::NotConverged("hard-calibration proxy"));
    }
    weighted_mean(frame, &s.weights)
}

/// Origin of the `θ_N` stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxySource {
    Hard,
    /// Hard calibration has no solution, as when a cluster has no selected
    /// unit; the soft estimate at the seeded `γ*` is used instead.
    Soft { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaProxy {
    pub value: f64,
    pub source: ProxySource,
}

/// The hard-calibration estimate, or the soft one at `γ*` when the hard
/// problem fails. The hard error is returned if both fail.
pub fn theta_proxy(frame: &PopulationFrame, loss: &LossSpec, spec: &MixedEffectsSpec, opts: &SolverOptions) -> Result<ThetaProxy> {
    let hard_err = match hard_proxy(frame, loss, opts) {
        Ok(value) => {
            return Ok(ThetaProxy {
                value,
                source: ProxySource::Hard,
            })
        }
        Err(e) => e,
    };
    let soft = || -> Result<ThetaProxy> {
        let gamma = reml_gamma_seed(frame, spec)?.gamma * sample_weight_scale(frame);
        let (_, s) = soft_calibrate(frame, loss, &spec.with_gamma(gamma), opts)?;
        if !s.converged {
            return Err(SoftcalError::NotConverged("soft proxy"));
        }
        Ok(ThetaProxy {
            value: weighted_mean(frame, &s.weights)?,
            source: ProxySource::Soft { gamma },
        })
    };
    soft().map_err(|_| hard_err)
}

/// Cross-fitted MSE of the soft estimator at one `γ`.
pub fn crossfit_mse(
    frame: &PopulationFrame,
    loss: &LossSpec,
    spec: &MixedEffectsSpec,
    gamma: f64,
    opts: &TuneOptions,
) -> Result<CrossFit> {
    let proxy = theta_proxy(frame, opts.proxy_loss.as_ref().unwrap_or(loss), spec, &opts.solver)?.value;
    let assignment = fold_assignment(frame.n_total(), opts.folds, opts.seed);
    let s = spec.with_gamma(gamma);
    crossfit_with(
        frame,
        loss,
        |tr| soft_calibrate(tr, loss, &s, &opts.solver),
        proxy,
        &assignment,
        opts.folds,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub gamma_star: f64,
    pub grid: Vec<f64>,
    pub mse: Vec<f64>,
    pub gamma_selected: f64,
    pub folds: usize,
    /// Restricted-likelihood seed before design-weight scaling.
    pub reml: RemlSeed,
    /// Mean design weight of selected rows; the seed is multiplied by it
    /// so the penalty keeps its ratio to the weighted Gram.
    pub weight_scale: f64,
    pub proxy: ThetaProxy,
}

/// Mean design weight over selected rows.
pub fn sample_weight_scale(frame: &PopulationFrame) -> f64 {
    let idx = frame.sample_indices();
    idx.iter().map(|&i| frame.design_weight[i]).sum::<f64>() / idx.len().max(1) as f64
}

/// Picks `γ` from the grid around the seed; ties go to the smaller value.
pub fn select_gamma(
    frame: &PopulationFrame,
    loss: &LossSpec,
    spec: &MixedEffectsSpec,
    opts: &TuneOptions,
) -> Result<TuneResult> {
    frame.ensure_valid()?;
    let reml = reml_gamma_seed(frame, spec)?;
    let weight_scale = sample_weight_scale(frame);
    let gamma_star = reml.gamma * weight_scale;
    let grid = gamma_grid(gamma_star);
    let proxy = theta_proxy(frame, opts.proxy_loss.as_ref().unwrap_or(loss), spec, &opts.solver)?;
    let assignment = fold_assignment(frame.n_total(), opts.folds, opts.seed);
    let score = |g: &f64| {
        let s = spec.with_gamma(*g);
        crossfit_with(
            frame,
            loss,
            |tr| soft_calibrate(tr, loss, &s, &opts.solver),
            proxy.value,
            &assignment,
            opts.folds,
        )
        .map(|c| c.mse)
    };
    let mse: Vec<f64> = if opts.parallel {
        grid.par_iter().map(score).collect::<Result<_>>()?
    } else {
        grid.iter().map(score).collect::<Result<_>>()?
    };
    let j = argmin_first(&mse);
    Ok(TuneResult {
        gamma_star,
        gamma_selected: grid[j],
        grid,
        mse,
        folds: opts.folds,
        reml,
        weight_scale,
        proxy,
    })
}

/// `λ` grid for the ridge comparator.
pub fn lambda_grid() -> Vec<f64> {
    (-6..=4).map(|j| 10f64.powi(j)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaResult {
    pub grid: Vec<f64>,
    pub mse: Vec<f64>,
    pub lambda_selected: f64,
    pub proxy: ThetaProxy,
}

/// Cross-fitted choice of `λ` for the ridge comparator.
pub fn select_l2_lambda(frame: &PopulationFrame, loss: &LossSpec, opts: &TuneOptions) -> Result<LambdaResult> {
    let grid = lambda_grid();
    let spec = MixedEffectsSpec::identity(frame.q(), 1.0);
    let proxy = theta_proxy(frame, opts.proxy_loss.as_ref().unwrap_or(loss), &spec, &opts.solver)?;
    let assignment = fold_assignment(frame.n_total(), opts.folds, opts.seed);
    let score = |l: &f64| {
        crossfit_with(
            frame,
            loss,
            |tr| l2_penalized_solve(tr, loss, *l, &opts.solver),
            proxy.value,
            &assignment,
            opts.folds,
        )
        .map(|c| c.mse)
    };
    let mse: Vec<f64> = if opts.parallel {
        grid.par_iter().map(score).collect::<Result<_>>()?
    } else {
        grid.iter().map(score).collect::<Result<_>>()?
    };
    let j = argmin_first(&mse);
    Ok(LambdaResult {
        lambda_selected: grid[j],
        proxy,
        grid,
        mse,
    })
}
