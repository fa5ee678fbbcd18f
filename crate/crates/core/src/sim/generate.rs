//! Finite populations, two-stage samples and selection indicators.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Mode, OutcomeForm, ScenarioConfig};
use crate::cluster::ClusterDesign;
use crate::error::{Result, SoftcalError};
use crate::frame::PopulationFrame;

/// `K · N_i` units stored cluster by cluster: unit `u` is in cluster `u / N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub n_clusters: usize,
    pub cluster_size: usize,
    /// Shared cluster effect `aᵢ`; it enters both the outcome and the selection.
    pub cluster_effect: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    /// Outcome under control, or the only outcome in missing-data mode.
    pub y0: Vec<f64>,
    /// Outcome under treatment; causal mode only.
    pub y1: Option<Vec<f64>>,
}

impl Population {
    pub fn size(&self) -> usize {
        self.y0.len()
    }

    pub fn cluster_of(&self, unit: usize) -> usize {
        unit / self.cluster_size
    }

    /// `θ_N`: the population mean, or the mean of `y(1) − y(0)`.
    pub fn truth(&self) -> f64 {
        let n = self.size() as f64;
        match &self.y1 {
            None => self.y0.iter().sum::<f64>() / n,
            Some(y1) => y1.iter().zip(&self.y0).map(|(a, b)| a - b).sum::<f64>() / n,
        }
    }
}

/// Centers and scales to unit population standard deviation.
fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Draws a population and returns it with `θ_N`.
pub fn gen_population<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> (Population, f64) {
    let (big_k, big_ni) = (cfg.big_k, cfg.big_n_i);
    let size = big_k * big_ni;
    let a: Vec<f64> = (0..big_k).map(|_| rng.sample(StandardNormal)).collect();
    let mut x1: Vec<f64> = Vec::with_capacity(size);
    let mut x2: Vec<f64> = Vec::with_capacity(size);
    let mut e0: Vec<f64> = Vec::with_capacity(size);
    let mut e1: Vec<f64> = Vec::with_capacity(if cfg.mode == Mode::Causal { size } else { 0 });
    for _ in 0..size {
        x1.push(rng.random_range(-0.75..0.75));
        x2.push(rng.sample(StandardNormal));
        e0.push(rng.sample(StandardNormal));
        if cfg.mode == Mode::Causal {
            e1.push(rng.sample(StandardNormal));
        }
    }
    let extra = match cfg.outcome_form {
        OutcomeForm::Linear => vec![0.0; size],
        OutcomeForm::Nonlinear => {
            let x3 = standardize(&x1.iter().map(|v| v.exp()).collect::<Vec<_>>());
            let x4 = standardize(&x2.iter().map(|v| v.exp()).collect::<Vec<_>>());
            (0..size)
                .map(|u| x1[u] * x1[u] + x2[u] * x2[u] + 0.1 * x3[u] + 0.1 * x4[u])
                .collect()
        }
    };
    let mean_part: Vec<f64> = (0..size)
        .map(|u| x1[u] + x2[u] + extra[u] + cfg.lambda1 * a[u / big_ni])
        .collect();
    let y0: Vec<f64> = (0..size).map(|u| mean_part[u] + e0[u]).collect();
    let y1 = (cfg.mode == Mode::Causal).then(|| (0..size).map(|u| cfg.tau + mean_part[u] + e1[u]).collect());
    let pop = Population {
        n_clusters: big_k,
        cluster_size: big_ni,
        cluster_effect: a,
        x1,
        x2,
        y0,
        y1,
    };
    let truth = pop.truth();
    (pop, truth)
}

/// `logit p = −0.25 + x₁ + x₂ + λ₂ aᵢ`.
pub fn selection_prob(pop: &Population, unit: usize, lambda2: f64) -> f64 {
    let eta = -0.25 + pop.x1[unit] + pop.x2[unit] + lambda2 * pop.cluster_effect[pop.cluster_of(unit)];
    1.0 / (1.0 + (-eta).exp())
}

/// Independent Bernoulli draws for the listed units.
pub fn gen_selection<R: Rng + ?Sized>(pop: &Population, units: &[usize], lambda2: f64, rng: &mut R) -> Vec<bool> {
    units
        .iter()
        .map(|&u| rng.random::<f64>() < selection_prob(pop, u, lambda2))
        .collect()
}

/// Sampled units, cluster by cluster, with their design.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageSample {
    pub clusters: Vec<usize>,
    pub units: Vec<usize>,
    pub design: ClusterDesign,
}

/// SRS of `k` clusters, then SRS of `nᵢ` units inside each.
pub fn two_stage_sample<R: Rng + ?Sized>(pop: &Population, cfg: &ScenarioConfig, rng: &mut R) -> Result<TwoStageSample> {
    if cfg.n_i > pop.cluster_size {
        return Err(SoftcalError::Design(format!(
            "n_i = {} exceeds N_i = {}",
            cfg.n_i, pop.cluster_size
        )));
    }
    if cfg.k > pop.n_clusters {
        return Err(SoftcalError::Design(format!("k = {} exceeds K = {}", cfg.k, pop.n_clusters)));
    }
    let mut clusters = index::sample(rng, pop.n_clusters, cfg.k).into_vec();
    clusters.sort_unstable();
    let mut units = Vec::with_capacity(cfg.k * cfg.n_i);
    let mut ids = Vec::with_capacity(cfg.k * cfg.n_i);
    for (c, &cl) in clusters.iter().enumerate() {
        let mut within = index::sample(rng, pop.cluster_size, cfg.n_i).into_vec();
        within.sort_unstable();
        for j in within {
            units.push(cl * pop.cluster_size + j);
            ids.push(c);
        }
    }
    let d = pop.n_clusters as f64 / cfg.k as f64;
    let design = ClusterDesign::new(ids, vec![d; cfg.k], vec![pop.cluster_size; cfg.k])?;
    Ok(TwoStageSample { clusters, units, design })
}

/// Frame over the sampled units with `x1 = (1, x₁, x₂)` and cluster dummies.
///
/// `delta` is the response indicator in missing-data mode and the
/// treatment in causal mode, where every outcome is observed.
pub fn sample_frame(pop: &Population, sample: &TwoStageSample, delta: Vec<bool>) -> Result<PopulationFrame> {
    let n = sample.units.len();
    let x1 = DMatrix::from_fn(n, 3, |r, j| match j {
        0 => 1.0,
        1 => pop.x1[sample.units[r]],
        _ => pop.x2[sample.units[r]],
    });
    let y = (0..n)
        .map(|r| {
            let u = sample.units[r];
            match &pop.y1 {
                None => delta[r].then_some(pop.y0[u]),
                Some(y1) => Some(if delta[r] { y1[u] } else { pop.y0[u] }),
            }
        })
        .collect();
    sample.design.frame(x1, y, delta)
}
