//! Two-stage cluster designs, cluster-level variance and the causal contrast.
//!
//! Frame rows are the units of a two-stage sample. Cluster indicators sit
//! in the `x2` block and unit design weights `dᵢⱼ = dᵢ Nᵢ / nᵢ` in the
//! frame's design weights, so the generic targets and solver apply
//! unchanged: `t_x` becomes the design-weighted totals and the penalized
//! Gram is `Σ dqxxᵀ + γ D_q⁻¹`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::calibrate::{build_soft_targets, hard_targets, soft_calibrate, MixedEffectsSpec, SoftTargets, SolveResult, SolverOptions};
use crate::error::{Result, SoftcalError};
use crate::estimate::{influence_values, normal_quantile, weighted_mean, EstimateReport};
use crate::frame::PopulationFrame;
use crate::loss::LossSpec;
use crate::tune::{select_gamma, TuneOptions};

/// Sampled clusters with their first-stage weights and sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterDesign {
    /// Cluster of each frame row, in `0..k`.
    pub cluster_id: Vec<usize>,
    pub d_cluster: Vec<f64>,
    pub n_per: Vec<usize>,
    pub n_pop_per: Vec<usize>,
}

impl ClusterDesign {
    /// Counts `nᵢ` from `cluster_id`.
    pub fn new(cluster_id: Vec<usize>, d_cluster: Vec<f64>, n_pop_per: Vec<usize>) -> Result<Self> {
        let k = d_cluster.len();
        if n_pop_per.len() != k {
            return Err(SoftcalError::DimensionMismatch {
                what: "cluster sizes",
                expected: k,
                got: n_pop_per.len(),
            });
        }
        let mut n_per = vec![0usize; k];
        for (row, &c) in cluster_id.iter().enumerate() {
            if c >= k {
                return Err(SoftcalError::Design(format!("row {row}: unknown cluster id {c}")));
            }
            n_per[c] += 1;
        }
        if let Some(c) = n_per.iter().position(|&m| m == 0) {
            return Err(SoftcalError::Design(format!("cluster {c} has no sampled units")));
        }
        if let Some(c) = d_cluster.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(SoftcalError::Design(format!("cluster {c} has nonpositive weight")));
        }
        if let Some(c) = (0..k).find(|&c| n_pop_per[c] < n_per[c]) {
            return Err(SoftcalError::Design(format!("cluster {c}: N_i smaller than n_i")));
        }
        Ok(Self {
            cluster_id,
            d_cluster,
            n_per,
            n_pop_per,
        })
    }

    /// Builds a design from per-row labels, `dᵢ` and `Nᵢ`; clusters are
    /// numbered by first appearance.
    pub fn from_rows(labels: &[String], d_i: &[f64], n_pop_i: &[f64]) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut ids = Vec::with_capacity(labels.len());
        let mut d = Vec::new();
        let mut big = Vec::new();
        for (row, lab) in labels.iter().enumerate() {
            let next = index.len();
            let c = *index.entry(lab.as_str()).or_insert(next);
            if c == d.len() {
                if n_pop_i[row].fract() != 0.0 || n_pop_i[row] < 1.0 {
                    return Err(SoftcalError::Design(format!("row {row}: N_i must be a positive integer")));
                }
                d.push(d_i[row]);
                big.push(n_pop_i[row] as usize);
            } else if d[c] != d_i[row] || big[c] as f64 != n_pop_i[row] {
                return Err(SoftcalError::Design(format!(
                    "row {row}: d_i or N_i differs within cluster `{lab}`"
                )));
            }
            ids.push(c);
        }
        Self::new(ids, d, big)
    }

    pub fn k(&self) -> usize {
        self.d_cluster.len()
    }

    pub fn n(&self) -> usize {
        self.cluster_id.len()
    }

    /// `dᵢⱼ = dᵢ Nᵢ / nᵢ` per frame row.
    pub fn unit_weights(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |r, _| {
            let c = self.cluster_id[r];
            self.d_cluster[c] * self.n_pop_per[c] as f64 / self.n_per[c] as f64
        })
    }

    /// Canonical indicator rows `zᵢⱼ = sᵢ`.
    pub fn dummies(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.k(), |r, c| if self.cluster_id[r] == c { 1.0 } else { 0.0 })
    }

    /// Frame with cluster dummies in `x2` and design weights set.
    pub fn frame(&self, x1: DMatrix<f64>, y: Vec<Option<f64>>, delta: Vec<bool>) -> Result<PopulationFrame> {
        PopulationFrame::new(x1, self.dummies(), y, delta)?.with_design_weights(self.unit_weights())
    }

    fn check_frame(&self, frame: &PopulationFrame) -> Result<()> {
        if frame.n_total() != self.n() || frame.q() != self.k() {
            return Err(SoftcalError::Design(format!(
                "frame has {} rows and {} random-effect columns; design has {} units in {} clusters",
                frame.n_total(),
                frame.q(),
                self.n(),
                self.k()
            )));
        }
        let uw = self.unit_weights();
        let off = (0..self.n()).find(|&r| (frame.design_weight[r] - uw[r]).abs() > 1e-12 * uw[r]);
        if let Some(r) = off {
            return Err(SoftcalError::Design(format!("row {r}: design weight does not match d_i N_i / n_i")));
        }
        Ok(())
    }
}

/// Soft targets for a cluster frame; `γ = 0` gives hard calibration,
/// which needs no panels since the dummies span the intercept.
pub fn build_cluster_targets(frame: &PopulationFrame, design: &ClusterDesign, spec: &MixedEffectsSpec) -> Result<SoftTargets> {
    design.check_frame(frame)?;
    if spec.gamma == 0.0 {
        hard_targets(frame)
    } else {
        build_soft_targets(frame, spec)
    }
}

/// `θ̂_w = N⁻¹ Σ dᵢⱼ δᵢⱼ wᵢⱼ yᵢⱼ`.
pub fn cluster_estimate(frame: &PopulationFrame, solve: &SolveResult) -> Result<f64> {
    weighted_mean(frame, &solve.weights)
}

/// First-stage joint-inclusion structure.
#[derive(Debug, Clone, PartialEq)]
pub enum Omega {
    /// Independent draws: `k/(k−1) Σ (tᵢ − t̄)²`.
    WithReplacement,
    /// User-supplied `k × k` matrix applied to the cluster totals.
    Matrix(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterVariance {
    /// `V̂₁` on the `√n` scale.
    pub v1: f64,
    /// `V̂₁ / n`.
    pub var_theta: f64,
    /// `tᵢ = Σⱼ dᵢⱼ ψᵢⱼ`.
    pub cluster_totals: DVector<f64>,
}

/// Cluster-level variance of `N⁻¹ Σ dψ` for any per-row `ψ`.
pub fn cluster_variance_from_psi(
    psi: &DVector<f64>,
    frame: &PopulationFrame,
    design: &ClusterDesign,
    omega: &Omega,
) -> Result<ClusterVariance> {
    let k = design.k();
    if k < 2 {
        return Err(SoftcalError::TooFewClusters(k));
    }
    if psi.len() != design.n() || frame.n_total() != design.n() {
        return Err(SoftcalError::DimensionMismatch {
            what: "psi",
            expected: design.n(),
            got: psi.len(),
        });
    }
    let mut t = DVector::zeros(k);
    for r in 0..design.n() {
        t[design.cluster_id[r]] += frame.design_weight[r] * psi[r];
    }
    let big_n = frame.pop_size();
    let quad = match omega {
        Omega::WithReplacement => {
            let mean = t.mean();
            let ss: f64 = t.iter().map(|v: &f64| (v - mean).powi(2)).sum();
            k as f64 / (k as f64 - 1.0) * ss
        }
        Omega::Matrix(m) => {
            if m.shape() != (k, k) {
                return Err(SoftcalError::DimensionMismatch {
                    what: "omega",
                    expected: k,
                    got: m.nrows(),
                });
            }
            (t.transpose() * m * &t)[(0, 0)]
        }
    };
    let var_theta = quad / (big_n * big_n);
    let n = design.n() as f64;
    Ok(ClusterVariance {
        v1: n * var_theta,
        var_theta,
        cluster_totals: t,
    })
}

/// Cluster-level `V̂₁` from the influence values of a converged solve.
pub fn cluster_variance(
    frame: &PopulationFrame,
    design: &ClusterDesign,
    solve: &SolveResult,
    targets: &SoftTargets,
    omega: &Omega,
) -> Result<ClusterVariance> {
    let inf = influence_values(frame, solve, targets)?;
    cluster_variance_from_psi(&inf.psi, frame, design, omega)
}

/// Point estimate, cluster variance and interval for one cluster solve.
pub fn cluster_report(
    frame: &PopulationFrame,
    design: &ClusterDesign,
    solve: &SolveResult,
    targets: &SoftTargets,
    method: &str,
    level: f64,
) -> Result<EstimateReport> {
    let theta = cluster_estimate(frame, solve)?;
    let inf = influence_values(frame, solve, targets)?;
    let cv = cluster_variance_from_psi(&inf.psi, frame, design, &Omega::WithReplacement)?;
    let half = normal_quantile(level) * cv.var_theta.sqrt();
    Ok(EstimateReport {
        theta,
        v1: cv.v1,
        v2: 0.0,
        ci_low: theta - half,
        ci_high: theta + half,
        psi: inf.psi,
        method: method.to_string(),
        converged: solve.converged,
        gamma: targets.gamma,
        level,
    })
}

/// Treatment indicators for a fully observed cluster frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalFrame {
    pub treatment: Vec<bool>,
}

/// Penalty per arm.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmGamma {
    Fixed { treated: f64, control: f64 },
    Tuned(TuneOptions),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalReport {
    pub report: EstimateReport,
    pub theta_treated: f64,
    pub theta_control: f64,
    pub gamma_treated: f64,
    pub gamma_control: f64,
}

/// Soft-calibrated estimate of one arm's mean, balanced to the combined sample.
pub fn arm_solve(
    frame: &PopulationFrame,
    design: &ClusterDesign,
    arm: bool,
    treatment: &[bool],
    spec: &MixedEffectsSpec,
    loss: &LossSpec,
    gamma: Option<f64>,
    tune: Option<&TuneOptions>,
    solver: &SolverOptions,
) -> Result<(f64, SoftTargets, SolveResult, PopulationFrame)> {
    let delta: Vec<bool> = treatment.iter().map(|&a| a == arm).collect();
    if !delta.iter().any(|&s| s) {
        return Err(SoftcalError::EmptyArm(arm as u8));
    }
    let f = frame.with_delta(delta)?;
    let g = match (gamma, tune) {
        (Some(g), _) => g,
        (None, Some(t)) => select_gamma(&f, loss, spec, t)?.gamma_selected,
        (None, None) => spec.gamma,
    };
    let s = spec.with_gamma(g);
    design.check_frame(&f)?;
    let (targets, solve) = soft_calibrate(&f, loss, &s, solver)?;
    if !solve.converged {
        return Err(SoftcalError::NotConverged("treatment arm"));
    }
    Ok((g, targets, solve, f))
}

/// `τ̂ = θ̂₁ − θ̂₀` with each arm calibrated to the combined design-weighted
/// totals; variance from the cluster totals of `φ = ψ⁽¹⁾ − ψ⁽⁰⁾`.
pub fn causal_ate(
    frame: &PopulationFrame,
    causal: &CausalFrame,
    design: &ClusterDesign,
    spec: &MixedEffectsSpec,
    loss: &LossSpec,
    gamma: &ArmGamma,
    solver: &SolverOptions,
    level: f64,
) -> Result<CausalReport> {
    if causal.treatment.len() != frame.n_total() {
        return Err(SoftcalError::DimensionMismatch {
            what: "treatment",
            expected: frame.n_total(),
            got: causal.treatment.len(),
        });
    }
    if let Some(i) = (0..frame.n_total()).find(|&i| frame.y[i].is_none()) {
        return Err(SoftcalError::InvalidFrame(format!("y missing at row {i}; causal frames need every outcome")));
    }
    let (g1, g0, tune) = match gamma {
        ArmGamma::Fixed { treated, control } => (Some(*treated), Some(*control), None),
        ArmGamma::Tuned(t) => (None, None, Some(t)),
    };
    let run = |arm: bool, g: Option<f64>| arm_solve(frame, design, arm, &causal.treatment, spec, loss, g, tune, solver);
    let (r1, r0) = rayon::join(|| run(true, g1), || run(false, g0));
    let (gamma1, t1, s1, f1) = r1?;
    let (gamma0, t0, s0, f0) = r0?;
    let theta1 = weighted_mean(&f1, &s1.weights)?;
    let theta0 = weighted_mean(&f0, &s0.weights)?;
    let psi1 = influence_values(&f1, &s1, &t1)?.psi;
    let psi0 = influence_values(&f0, &s0, &t0)?.psi;
    let phi = &psi1 - &psi0;
    let cv = cluster_variance_from_psi(&phi, frame, design, &Omega::WithReplacement)?;
    let tau = theta1 - theta0;
    let half = normal_quantile(level) * cv.var_theta.sqrt();
    Ok(CausalReport {
        report: EstimateReport {
            theta: tau,
            v1: cv.v1,
            v2: 0.0,
            ci_low: tau - half,
            ci_high: tau + half,
            psi: phi,
            method: format!("ate_{}", loss.family.code()),
            converged: s1.converged && s0.converged,
            gamma: f64::NAN,
            level,
        },
        theta_treated: theta1,
        theta_control: theta0,
        gamma_treated: gamma1,
        gamma_control: gamma0,
    })
}
