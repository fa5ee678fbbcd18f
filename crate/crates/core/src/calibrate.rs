//! Soft-calibration targets and the Newton solver for the dual problem.
//!
//! The solver minimises the scaled dual
//!
//! ```text
//! G(c)/N = N⁻¹ Σ dᵢ δᵢ g(cᵀxᵢ; qᵢ) − cᵀ t_x
//! ```
//!
//! whose stationary point gives weights `wᵢ = w(ĉᵀxᵢ)` satisfying
//! `Σ dᵢ δᵢ wᵢ xᵢ = N t_x`. The fixed-effect part of `t_x` is the population
//! mean of `x1`; the random-effect part is the mean of `x2` shifted by the
//! soft adjustment `T_r`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoftcalError};
use crate::frame::{sample_view, PopulationFrame};
use crate::linalg::{self, DEFAULT_PINV_TOL};
use crate::loss::LossSpec;

/// Random-effect covariance structure and penalty ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedEffectsSpec {
    pub d_q: DMatrix<f64>,
    pub gamma: f64,
}

impl MixedEffectsSpec {
    pub fn identity(q: usize, gamma: f64) -> Self {
        Self {
            d_q: DMatrix::identity(q, q),
            gamma,
        }
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            d_q: self.d_q.clone(),
            gamma,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.d_q.shape() != (q, q) {
            return Err(SoftcalError::DimensionMismatch {
                what: "d_q",
                expected: q,
                got: self.d_q.nrows(),
            });
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(SoftcalError::InvalidSpec(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        let asym = (&self.d_q - self.d_q.transpose()).abs().max();
        if q > 0 && asym > 1e-12 {
            return Err(SoftcalError::InvalidSpec(format!("d_q not symmetric (max gap {asym:e})")));
        }
        if q > 0 {
            let eig = self.d_q.clone().symmetric_eigenvalues();
            if eig.min() <= 0.0 {
                return Err(SoftcalError::InvalidSpec("d_q not positive definite".into()));
            }
        }
        Ok(())
    }

    pub fn d_q_inverse(&self) -> Result<DMatrix<f64>> {
        if self.d_q.is_empty() {
            return Ok(self.d_q.clone());
        }
        linalg::spd_inverse(&self.d_q, DEFAULT_PINV_TOL)
            .ok_or_else(|| SoftcalError::InvalidSpec("d_q not positive definite".into()))
    }
}

/// Panels of `{Σ_S dqxxᵀ + γ blockdiag(0, D_q⁻¹)}⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPanels {
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
}

impl BlockPanels {
    pub fn assemble(&self) -> DMatrix<f64> {
        let (p, q) = (self.d11.nrows(), self.d22.nrows());
        let mut m = DMatrix::zeros(p + q, p + q);
        m.view_mut((0, 0), (p, p)).copy_from(&self.d11);
        m.view_mut((0, p), (p, q)).copy_from(&self.d12);
        m.view_mut((p, 0), (q, p)).copy_from(&self.d21);
        m.view_mut((p, p), (q, q)).copy_from(&self.d22);
        m
    }
}

/// Right-hand sides of the soft calibration constraints.
///
/// `panels` is `None` only for hard targets on a rank-deficient sample
/// Gram, where the adjustments vanish and no inverse is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub panels: Option<BlockPanels>,
    pub m_s: DMatrix<f64>,
    pub r_s: DMatrix<f64>,
    pub t_r: DVector<f64>,
    pub t_x: DVector<f64>,
    pub gamma: f64,
    pub pop_size: f64,
}

impl SoftTargets {
    pub fn p(&self) -> usize {
        self.m_s.nrows()
    }
    pub fn q(&self) -> usize {
        self.r_s.nrows()
    }
}

/// `Σ_S dᵢqᵢxᵢxᵢᵀ + γ blockdiag(0_p, D_q⁻¹)`.
pub fn penalized_gram(frame: &PopulationFrame, spec: &MixedEffectsSpec) -> Result<DMatrix<f64>> {
    let sv = sample_view(frame)?;
    let p = frame.p();
    let xs = sv.x_full();
    let mut c = linalg::weighted_gram(&xs, &sv.d.component_mul(&sv.q));
    if spec.gamma > 0.0 && frame.q() > 0 {
        let pen = spec.d_q_inverse()? * spec.gamma;
        let q = frame.q();
        let mut blk = c.view_mut((p, p), (q, q));
        blk += pen;
    }
    Ok(c)
}

fn population_means(frame: &PopulationFrame) -> (DVector<f64>, DVector<f64>, f64) {
    let n = frame.pop_size();
    let m1 = frame.x1.tr_mul(&frame.design_weight) / n;
    let m2 = frame.x2.tr_mul(&frame.design_weight) / n;
    (m1, m2, n)
}

/// Builds panels, `M_S`, `R_S`, `T_r` and `t_x` at the given penalty.
pub fn build_soft_targets(frame: &PopulationFrame, spec: &MixedEffectsSpec) -> Result<SoftTargets> {
    frame.ensure_valid()?;
    let (p, q) = (frame.p(), frame.q());
    spec.validate(q)?;
    let c = penalized_gram(frame, spec)?;
    let cinv = linalg::spd_inverse(&c, DEFAULT_PINV_TOL).ok_or_else(|| SoftcalError::Singular {
        what: "penalized sample Gram",
        rank: linalg::rank(&c, DEFAULT_PINV_TOL),
        dim: p + q,
    })?;
    let panels = BlockPanels {
        d11: cinv.view((0, 0), (p, p)).into_owned(),
        d12: cinv.view((0, p), (p, q)).into_owned(),
        d21: cinv.view((p, 0), (q, p)).into_owned(),
        d22: cinv.view((p, p), (q, q)).into_owned(),
    };
    let dq_inv = spec.d_q_inverse()?;
    let m_s = -spec.gamma * &panels.d12 * &dq_inv;
    let r_s = -spec.gamma * &panels.d22 * &dq_inv;
    let (m1, m2, n) = population_means(frame);
    let t_r = m_s.tr_mul(&m1) + r_s.tr_mul(&m2);
    let mut t_x = DVector::zeros(p + q);
    t_x.rows_mut(0, p).copy_from(&m1);
    t_x.rows_mut(p, q).copy_from(&(&m2 + &t_r));
    Ok(SoftTargets {
        panels: Some(panels),
        m_s,
        r_s,
        t_r,
        t_x,
        gamma: spec.gamma,
        pop_size: n,
    })
}

/// Exact calibration on every column of `(x1, x2)`.
///
/// Panels are filled when the sample Gram is invertible; a rank-deficient
/// Gram (for example cluster dummies alongside an intercept) is allowed.
pub fn hard_targets(frame: &PopulationFrame) -> Result<SoftTargets> {
    let (p, q) = (frame.p(), frame.q());
    match build_soft_targets(frame, &MixedEffectsSpec::identity(q, 0.0)) {
        Ok(t) => Ok(t),
        Err(SoftcalError::Singular { .. }) => {
            let (m1, m2, n) = population_means(frame);
            let mut t_x = DVector::zeros(p + q);
            t_x.rows_mut(0, p).copy_from(&m1);
            t_x.rows_mut(p, q).copy_from(&m2);
            Ok(SoftTargets {
                panels: None,
                m_s: DMatrix::zeros(p, q),
                r_s: DMatrix::zeros(q, q),
                t_r: DVector::zeros(q),
                t_x,
                gamma: 0.0,
                pop_size: n,
            })
        }
        Err(e) => Err(e),
    }
}

/// Treatment of a numerically singular Newton system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianPolicy {
    /// Truncated-SVD pseudo-inverse, cut at `rel_tol · σ_max`.
    PseudoInverse { rel_tol: f64 },
    /// Adds `rel_eps · trace / dim` to the diagonal.
    Ridge { rel_eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol_weights: f64,
    pub tol_grad: f64,
    /// Convergence requires `‖∇G/N‖∞ ≤ tol_constraint`.
    pub tol_constraint: f64,
    pub max_halvings: usize,
    pub hessian: HessianPolicy,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_weights: 1e-10,
            tol_grad: 1e-10,
            tol_constraint: 1e-8,
            max_halvings: 50,
            hessian: HessianPolicy::PseudoInverse {
                rel_tol: DEFAULT_PINV_TOL,
            },
        }
    }
}

/// Dual solution and the implied weights on the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub c_hat: DVector<f64>,
    /// `w(ĉᵀxᵢ)` for sample rows, in frame order.
    pub weights: DVector<f64>,
    /// `w'(ĉᵀxᵢ)` at the final iterate.
    pub weight_derivs: DVector<f64>,
    /// Frame row of each sample row.
    pub sample_index: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ dδw x1 − N t_x1`.
    pub residual_fixed: DVector<f64>,
    /// `Σ dδw x2 − N t_x2`.
    pub residual_random: DVector<f64>,
    pub objective_trace: Vec<f64>,
    /// `‖∇‖∞` of the minimised objective at the returned iterate.
    pub grad_norm: f64,
    pub pop_size: f64,
}

impl SolveResult {
    /// Weights scattered to frame rows, zero off the sample.
    pub fn frame_weights(&self, n_total: usize) -> DVector<f64> {
        let mut w = DVector::zeros(n_total);
        for (k, &i) in self.sample_index.iter().enumerate() {
            w[i] = self.weights[k];
        }
        w
    }

    pub fn max_residual(&self) -> f64 {
        linalg::max_abs(&self.residual_fixed).max(linalg::max_abs(&self.residual_random))
    }
}

/// Sample-side data for repeated objective evaluations.
pub(crate) struct DualSystem<'a> {
    pub loss: &'a LossSpec,
    pub xs: DMatrix<f64>,
    pub ds: DVector<f64>,
    pub qs: DVector<f64>,
    pub index: Vec<usize>,
    pub t_x: DVector<f64>,
    pub pop: f64,
    pub p: usize,
    /// `λ` on the `x2` block of `c`.
    pub penalty: f64,
}

pub(crate) struct DualEval {
    pub obj: f64,
    pub w: DVector<f64>,
    pub dw: DVector<f64>,
}

impl<'a> DualSystem<'a> {
    pub fn new(frame: &PopulationFrame, loss: &'a LossSpec, t_x: DVector<f64>, pop: f64) -> Result<Self> {
        let sv = sample_view(frame)?;
        let xs = sv.x_full();
        if t_x.len() != xs.ncols() {
            return Err(SoftcalError::DimensionMismatch {
                what: "targets",
                expected: xs.ncols(),
                got: t_x.len(),
            });
        }
        Ok(Self {
            loss,
            xs,
            ds: sv.d,
            qs: sv.q,
            index: sv.index,
            t_x,
            pop,
            p: frame.p(),
            penalty: 0.0,
        })
    }

    fn dim(&self) -> usize {
        self.xs.ncols()
    }

    /// Objective and per-unit `w`, `w'`; `Err(unit)` names the first frame
    /// row outside the conjugate domain.
    pub fn eval(&self, c: &DVector<f64>) -> std::result::Result<DualEval, (usize, f64)> {
        let z = &self.xs * c;
        let n = z.len();
        let mut w = DVector::zeros(n);
        let mut dw = DVector::zeros(n);
        let mut acc = 0.0;
        for k in 0..n {
            let pt = self.loss.eval(z[k], self.qs[k]).ok_or((self.index[k], z[k]))?;
            acc += self.ds[k] * pt.g;
            w[k] = pt.w;
            dw[k] = pt.dw;
        }
        let mut obj = acc / self.pop - c.dot(&self.t_x);
        if self.penalty > 0.0 {
            let c2 = c.rows(self.p, self.dim() - self.p);
            obj += 0.5 * self.penalty * c2.norm_squared();
        }
        if !obj.is_finite() {
            return Err((self.index.first().copied().unwrap_or(0), f64::INFINITY));
        }
        Ok(DualEval { obj, w, dw })
    }

    /// Constraint imbalance `Σ dδw x − N t_x`.
    pub fn imbalance(&self, ev: &DualEval) -> DVector<f64> {
        let dw = self.ds.component_mul(&ev.w);
        self.xs.tr_mul(&dw) - &self.t_x * self.pop
    }

    pub fn gradient(&self, c: &DVector<f64>, ev: &DualEval) -> DVector<f64> {
        let mut g = self.imbalance(ev) / self.pop;
        if self.penalty > 0.0 {
            let m = self.dim();
            for j in self.p..m {
                g[j] += self.penalty * c[j];
            }
        }
        g
    }

    pub fn hessian(&self, ev: &DualEval) -> DMatrix<f64> {
        let s = self.ds.component_mul(&ev.dw) / self.pop;
        let mut h = linalg::weighted_gram(&self.xs, &s);
        if self.penalty > 0.0 {
            for j in self.p..self.dim() {
                h[(j, j)] += self.penalty;
            }
        }
        h
    }

    fn newton_step(&self, h: &DMatrix<f64>, g: &DVector<f64>, policy: HessianPolicy) -> DVector<f64> {
        if let Some(ch) = linalg::cholesky_checked(h, DEFAULT_PINV_TOL) {
            return ch.solve(g);
        }
        match policy {
            HessianPolicy::PseudoInverse { rel_tol } => linalg::pinv(h, rel_tol).0 * g,
            HessianPolicy::Ridge { rel_eps } => {
                let m = h.nrows().max(1);
                let eps = rel_eps * h.trace() / m as f64;
                let mut hr = h.clone();
                for j in 0..h.nrows() {
                    hr[(j, j)] += eps;
                }
                match hr.clone().cholesky() {
                    Some(ch) => ch.solve(g),
                    None => linalg::pinv(&hr, DEFAULT_PINV_TOL).0 * g,
                }
            }
        }
    }

    /// Damped Newton iterations from `c = 0`.
    pub fn solve(&self, opts: &SolverOptions) -> Result<SolveResult> {
        let m = self.dim();
        let mut c = DVector::zeros(m);
        let mut ev = self
            .eval(&c)
            .map_err(|(unit, z)| SoftcalError::UnitDomain { unit, z })?;
        let mut trace = vec![ev.obj];
        let mut iterations = 0;
        for it in 1..=opts.max_iter {
            let g = self.gradient(&c, &ev);
            if linalg::max_abs(&g) < opts.tol_grad {
                break;
            }
            let h = self.hessian(&ev);
            let step = self.newton_step(&h, &g, opts.hessian);
            let slack = 1e-14 * (1.0 + ev.obj.abs());
            let mut t = 1.0;
            let mut accepted = None;
            let mut left_domain = false;
            for _ in 0..=opts.max_halvings {
                let cn = &c - &step * t;
                match self.eval(&cn) {
                    Ok(e) if e.obj <= ev.obj + slack => {
                        accepted = Some((cn, e));
                        break;
                    }
                    Ok(_) => left_domain = false,
                    Err(_) => left_domain = true,
                }
                t *= 0.5;
            }
            let Some((cn, en)) = accepted else {
                if left_domain {
                    return Err(SoftcalError::Infeasible { iteration: it });
                }
                // no descent left at working precision
                break;
            };
            let dw = (&en.w - &ev.w).amax();
            c = cn;
            ev = en;
            trace.push(ev.obj);
            iterations = it;
            if dw < opts.tol_weights {
                break;
            }
        }
        let g = self.gradient(&c, &ev);
        let grad_norm = linalg::max_abs(&g);
        let imb = self.imbalance(&ev);
        Ok(SolveResult {
            weights: ev.w,
            weight_derivs: ev.dw,
            sample_index: self.index.clone(),
            iterations,
            converged: grad_norm <= opts.tol_constraint,
            residual_fixed: imb.rows(0, self.p).into_owned(),
            residual_random: imb.rows(self.p, m - self.p).into_owned(),
            objective_trace: trace,
            grad_norm,
            pop_size: self.pop,
            c_hat: c,
        })
    }
}

fn system<'a>(frame: &PopulationFrame, loss: &'a LossSpec, targets: &SoftTargets) -> Result<DualSystem<'a>> {
    if targets.p() != frame.p() || targets.q() != frame.q() {
        return Err(SoftcalError::DimensionMismatch {
            what: "targets",
            expected: frame.p() + frame.q(),
            got: targets.t_x.len(),
        });
    }
    DualSystem::new(frame, loss, targets.t_x.clone(), targets.pop_size)
}

fn check_c(c: &DVector<f64>, sys: &DualSystem) -> Result<()> {
    if c.len() == sys.dim() {
        Ok(())
    } else {
        Err(SoftcalError::DimensionMismatch {
            what: "c",
            expected: sys.dim(),
            got: c.len(),
        })
    }
}

/// `G(c)/N`.
pub fn dual_objective(c: &DVector<f64>, frame: &PopulationFrame, loss: &LossSpec, targets: &SoftTargets) -> Result<f64> {
    let sys = system(frame, loss, targets)?;
    check_c(c, &sys)?;
    sys.eval(c)
        .map(|e| e.obj)
        .map_err(|(unit, z)| SoftcalError::UnitDomain { unit, z })
}

/// `∇(G/N) = N⁻¹ Σ dδ w(cᵀx) x − t_x`.
pub fn dual_gradient(
    c: &DVector<f64>,
    frame: &PopulationFrame,
    loss: &LossSpec,
    targets: &SoftTargets,
) -> Result<DVector<f64>> {
    let sys = system(frame, loss, targets)?;
    check_c(c, &sys)?;
    let ev = sys.eval(c).map_err(|(unit, z)| SoftcalError::UnitDomain { unit, z })?;
    Ok(sys.gradient(c, &ev))
}

/// `∇²(G/N) = N⁻¹ Σ dδ w'(cᵀx) x xᵀ`.
pub fn dual_hessian(
    c: &DVector<f64>,
    frame: &PopulationFrame,
    loss: &LossSpec,
    targets: &SoftTargets,
) -> Result<DMatrix<f64>> {
    let sys = system(frame, loss, targets)?;
    check_c(c, &sys)?;
    let ev = sys.eval(c).map_err(|(unit, z)| SoftcalError::UnitDomain { unit, z })?;
    Ok(sys.hessian(&ev))
}

/// Minimises the dual by damped Newton steps.
///
/// Non-convergence is reported through `converged = false` with the best
/// iterate. An error is returned only when step halving cannot stay in
/// the conjugate domain.
pub fn solve_newton(
    frame: &PopulationFrame,
    loss: &LossSpec,
    targets: &SoftTargets,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    system(frame, loss, targets)?.solve(opts)
}

/// Hard calibration: the same solve with `γ = 0` targets.
pub fn hard_calibrate(frame: &PopulationFrame, loss: &LossSpec, opts: &SolverOptions) -> Result<(SoftTargets, SolveResult)> {
    let t = hard_targets(frame)?;
    let s = solve_newton(frame, loss, &t, opts)?;
    Ok((t, s))
}

/// Builds soft targets at `spec` and solves.
pub fn soft_calibrate(
    frame: &PopulationFrame,
    loss: &LossSpec,
    spec: &MixedEffectsSpec,
    opts: &SolverOptions,
) -> Result<(SoftTargets, SolveResult)> {
    let t = if spec.gamma == 0.0 {
        hard_targets(frame)?
    } else {
        build_soft_targets(frame, spec)?
    };
    let s = solve_newton(frame, loss, &t, opts)?;
    Ok((t, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64, n_pop: usize, p: usize, q: usize) -> PopulationFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = DMatrix::from_fn(n_pop, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let x2 = DMatrix::from_fn(n_pop, q, |_, _| rng.random_range(-1.0..1.0));
        let delta: Vec<bool> = (0..n_pop).map(|_| rng.random_bool(0.5)).collect();
        let y = (0..n_pop)
            .map(|i| delta[i].then(|| x1[(i, p - 1)] + rng.random_range(-1.0..1.0)))
            .collect();
        PopulationFrame::new(x1, x2, y, delta).unwrap()
    }

    #[test]
    fn zero_gamma_targets_are_means() {
        let f = random_frame(1, 80, 2, 3);
        let t = build_soft_targets(&f, &MixedEffectsSpec::identity(3, 0.0)).unwrap();
        assert_eq!(t.m_s.amax(), 0.0);
        assert_eq!(t.r_s.amax(), 0.0);
        assert_eq!(t.t_r.amax(), 0.0);
        let means = f.x_full().row_mean().transpose();
        assert!((&t.t_x - means).amax() < 1e-14);
    }

    #[test]
    fn panels_invert_penalized_gram() {
        let f = random_frame(2, 60, 3, 4);
        let spec = MixedEffectsSpec::identity(4, 1.5);
        let t = build_soft_targets(&f, &spec).unwrap();
        let c = penalized_gram(&f, &spec).unwrap();
        let id = t.panels.unwrap().assemble() * c;
        assert!((id - DMatrix::identity(7, 7)).amax() < 1e-10);
    }

    #[test]
    fn empty_random_block() {
        let f = random_frame(3, 40, 2, 0);
        let t = build_soft_targets(&f, &MixedEffectsSpec::identity(0, 1.0)).unwrap();
        assert_eq!(t.t_x.len(), 2);
        assert!(t.m_s.is_empty() && t.r_s.is_empty());
    }

    #[test]
    fn singular_gram_names_rank_gap() {
        let mut f = random_frame(4, 30, 2, 2);
        for i in 0..30 {
            f.x2[(i, 1)] = f.x2[(i, 0)];
        }
        let err = build_soft_targets(&f, &MixedEffectsSpec::identity(2, 0.0)).unwrap_err();
        assert!(matches!(err, SoftcalError::Singular { rank: 3, dim: 4, .. }), "{err}");
        let h = hard_targets(&f).unwrap();
        assert!(h.panels.is_none());
    }

    #[test]
    fn full_selection_gives_unit_weights() {
        let mut f = random_frame(5, 50, 2, 2);
        f.delta = vec![true; 50];
        f.y = (0..50).map(|i| Some(i as f64)).collect();
        // EL and entropy have w(0) = 1, so c = 0 already solves
        for loss in [LossSpec::square(), LossSpec::entropy(), LossSpec::empirical_likelihood()] {
            let (_, s) = hard_calibrate(&f, &loss, &SolverOptions::default()).unwrap();
            assert!(s.converged);
            assert!(s.c_hat.amax() < 1e-12);
            assert!((s.weights.add_scalar(-1.0)).amax() < 1e-12);
        }
    }

    #[test]
    fn maximum_entropy_weights_exceed_one() {
        let f = random_frame(6, 200, 2, 2);
        let (_, s) = hard_calibrate(&f, &LossSpec::maximum_entropy(), &SolverOptions::default()).unwrap();
        assert!(s.converged);
        assert!(s.max_residual() < 1e-8 * s.pop_size);
        assert!(s.weights.iter().all(|&w| w > 1.0));
    }

    #[test]
    fn objective_is_nonincreasing() {
        let f = random_frame(7, 150, 3, 3);
        let t = build_soft_targets(&f, &MixedEffectsSpec::identity(3, 0.5)).unwrap();
        let s = solve_newton(&f, &LossSpec::empirical_likelihood(), &t, &SolverOptions::default()).unwrap();
        for w in s.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn ridge_policy_handles_collinear_columns() {
        let mut f = random_frame(8, 120, 2, 2);
        for i in 0..120 {
            f.x2[(i, 1)] = 2.0 * f.x2[(i, 0)];
        }
        let t = hard_targets(&f).unwrap();
        for policy in [
            HessianPolicy::PseudoInverse { rel_tol: 1e-12 },
            HessianPolicy::Ridge { rel_eps: 1e-8 },
        ] {
            let opts = SolverOptions {
                hessian: policy,
                ..Default::default()
            };
            let s = solve_newton(&f, &LossSpec::entropy(), &t, &opts).unwrap();
            assert!(s.converged, "{policy:?}");
        }
    }

    #[test]
    fn deterministic() {
        let f = random_frame(9, 100, 2, 3);
        let t = build_soft_targets(&f, &MixedEffectsSpec::identity(3, 2.0)).unwrap();
        let a = solve_newton(&f, &LossSpec::maximum_entropy(), &t, &SolverOptions::default()).unwrap();
        let b = solve_newton(&f, &LossSpec::maximum_entropy(), &t, &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn domain_error_names_unit() {
        let f = random_frame(10, 30, 2, 1);
        let t = hard_targets(&f).unwrap();
        let c = DVector::from_vec(vec![5.0, 0.0, 0.0]);
        let err = dual_objective(&c, &f, &LossSpec::empirical_likelihood(), &t).unwrap_err();
        assert!(matches!(err, SoftcalError::UnitDomain { unit, .. } if f.delta[unit]));
    }
}
