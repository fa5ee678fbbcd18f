//! Soft calibration weighting under linear mixed-effects models.
//!
//! The crate computes calibration weights that match population totals of
//! fixed-effect covariates exactly while relaxing the totals of
//! random-effect covariates in proportion to a penalty `γ`. Weights come
//! from a convex dual solved by damped Newton steps, for any of six loss
//! families. On top of the solver sit point and variance estimators,
//! cross-fitted tuning of `γ`, two-stage cluster designs, a causal
//! contrast, and a Monte Carlo harness.

pub mod calibrate;
pub mod cluster;
pub mod error;
pub mod estimate;
pub mod frame;
pub mod linalg;
pub mod loss;
pub mod sim;
pub mod tune;

pub use calibrate::{
    build_soft_targets, hard_calibrate, hard_targets, soft_calibrate, solve_newton, MixedEffectsSpec,
    SoftTargets, SolveResult, SolverOptions,
};
pub use error::{Result, SoftcalError};
pub use frame::{sample_view, validate_frame, PopulationFrame};
pub use loss::{LossFamily, LossSpec};
