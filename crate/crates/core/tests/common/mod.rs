#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use softcal::{LossSpec, PopulationFrame};

/// Random frame with an intercept, `p − 1` uniform covariates, `q` normal
/// covariates, and selection that leans on the first covariate.
pub fn random_frame(seed: u64, n: usize, p: usize, q: usize) -> PopulationFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1 = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let x2 = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.7);
    let delta: Vec<bool> = (0..n)
        .map(|i| {
            let lean: f64 = if p > 1 { 0.6 * x1[(i, 1)] } else { 0.0 };
            rng.random::<f64>() < 1.0 / (1.0 + (-(0.3 + lean)).exp())
        })
        .collect();
    let y = (0..n)
        .map(|i| {
            let mean = x1.row(i).sum() + x2.row(i).iter().map(|v| 0.5 * v).sum::<f64>();
            let e: f64 = rng.sample(StandardNormal);
            delta[i].then_some(mean + 0.5 * e)
        })
        .collect();
    PopulationFrame::new(x1, x2, y, delta).unwrap()
}

/// Cluster-indicator `x2` for `k` clusters of `m` rows each.
pub fn cluster_frame(seed: u64, k: usize, m: usize) -> PopulationFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * m;
    let a: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let x1 = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-0.75..0.75) });
    let x2 = DMatrix::from_fn(n, k, |i, c| if i / m == c { 1.0 } else { 0.0 });
    let delta: Vec<bool> = (0..n)
        .map(|i| rng.random::<f64>() < 1.0 / (1.0 + (-(0.25 + x1[(i, 1)] + 0.5 * a[i / m])).exp()))
        .collect();
    let y = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            delta[i].then_some(x1[(i, 1)] + 0.5 * a[i / m] + e)
        })
        .collect();
    PopulationFrame::new(x1, x2, y, delta).unwrap()
}

/// One instance of every loss family, bounded ones at two bound pairs.
pub fn all_losses() -> Vec<LossSpec> {
    vec![
        LossSpec::square(),
        LossSpec::entropy(),
        LossSpec::empirical_likelihood(),
        LossSpec::maximum_entropy(),
        LossSpec::bounded_logistic(0.0, 10.0).unwrap(),
        LossSpec::bounded_logistic(0.2, 5.0).unwrap(),
        LossSpec::truncated_linear(0.0, 10.0).unwrap(),
    ]
}

/// `Σ dδw v` over selected rows.
pub fn weighted_sample_sum(frame: &PopulationFrame, weights: &DVector<f64>, v: &DVector<f64>) -> f64 {
    frame
        .sample_indices()
        .iter()
        .enumerate()
        .map(|(k, &i)| frame.design_weight[i] * weights[k] * v[i])
        .sum()
}
