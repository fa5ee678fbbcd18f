use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use softcal::calibrate::{hard_calibrate, soft_calibrate, MixedEffectsSpec, SolverOptions};
use softcal::estimate::weighted_mean;
use softcal::cluster::{cluster_estimate, ClusterDesign};
use softcal::sim::*;
use softcal::tune::{select_gamma, TuneOptions};
use softcal::LossSpec;

fn small(estimators: Vec<EstimatorLabel>) -> ScenarioConfig {
    ScenarioConfig {
        k: 4,
        n_i: 60,
        big_k: 20,
        big_n_i: 80,
        reps: 6,
        estimators,
        ..ScenarioConfig::default()
    }
}

/// ANOVA estimate of the between-cluster variance component of `y0`.
fn between_cluster_component(pop: &Population) -> f64 {
    let (k, m) = (pop.n_clusters, pop.cluster_size);
    let grand = pop.y0.iter().sum::<f64>() / (k * m) as f64;
    let means: Vec<f64> = (0..k).map(|c| pop.y0[c * m..(c + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let msb = m as f64 * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (k - 1) as f64;
    let ssw: f64 = (0..k * m).map(|u| (pop.y0[u] - means[u / m]).powi(2)).sum();
    let msw = ssw / (k * (m - 1)) as f64;
    (msb - msw) / m as f64
}

#[test]
fn no_outcome_cluster_effect_without_lambda1() {
    let mut prev = f64::INFINITY;
    for big_k in [50, 200, 800] {
        let cfg = ScenarioConfig {
            lambda1: 0.0,
            big_k,
            big_n_i: 50,
            ..ScenarioConfig::default()
        };
        let (pop, _) = gen_population(&cfg, &mut ChaCha20Rng::seed_from_u64(11));
        let total = pop.y0.iter().map(|v| v * v).sum::<f64>() / pop.size() as f64;
        let ratio = between_cluster_component(&pop).abs() / total;
        // the component's standard error shrinks like 1/(m√K)
        assert!(ratio < 4.0 * (2.0 / (big_k as f64)).sqrt() / 50.0 + 1e-3, "K={big_k} ratio {ratio}");
        prev = prev.min(ratio);
    }
    let strong = ScenarioConfig {
        lambda1: 1.0,
        big_k: 200,
        big_n_i: 50,
        ..ScenarioConfig::default()
    };
    let (pop, _) = gen_population(&strong, &mut ChaCha20Rng::seed_from_u64(11));
    assert!(between_cluster_component(&pop) > 0.5, "λ₁=1 component should be near 1");
    assert!(prev < 0.01);
}

#[test]
fn linear_population_mean_near_zero() {
    let cfg = ScenarioConfig::default();
    let (pop, truth) = gen_population(&cfg, &mut ChaCha20Rng::seed_from_u64(12));
    let n = pop.size() as f64;
    let var = pop.y0.iter().map(|v| v * v).sum::<f64>() / n;
    let se = (var / n + cfg.lambda1.powi(2) / cfg.big_k as f64).sqrt();
    assert!(truth.abs() < 4.0 * se, "mean {truth} se {se}");
}

#[test]
fn selection_dispersion_grows_with_lambda2() {
    let dispersion = |lambda2: f64| {
        let cfg = ScenarioConfig {
            big_k: 100,
            big_n_i: 60,
            lambda2,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (pop, _) = gen_population(&cfg, &mut rng);
        let units: Vec<usize> = (0..pop.size()).collect();
        let delta = gen_selection(&pop, &units, lambda2, &mut rng);
        let rates: Vec<f64> = (0..100)
            .map(|c| delta[c * 60..(c + 1) * 60].iter().filter(|&&d| d).count() as f64 / 60.0)
            .collect();
        let m = rates.iter().sum::<f64>() / 100.0;
        rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 99.0
    };
    let (weak, strong) = (dispersion(1.0), dispersion(10.0));
    assert!(strong >= 5.0 * weak, "λ₂=10: {strong}, λ₂=1: {weak}");
}

proptest! {
    #[test]
    fn selection_probability_is_interior(x1 in -0.75f64..0.75, x2 in -6.0f64..6.0, a in -3.0f64..3.0, l2 in 0.0f64..10.0) {
        let pop = Population {
            n_clusters: 1,
            cluster_size: 1,
            cluster_effect: vec![a],
            x1: vec![x1],
            x2: vec![x2],
            y0: vec![0.0],
            y1: None,
        };
        let p = selection_prob(&pop, 0, l2);
        prop_assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn full_response_two_stage_mean_is_unbiased() {
    let cfg = ScenarioConfig {
        big_k: 40,
        big_n_i: 30,
        k: 6,
        n_i: 10,
        lambda1: 1.0,
        ..ScenarioConfig::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let (pop, truth) = gen_population(&cfg, &mut rng);
    let draws = 1000;
    let est: Vec<f64> = (0..draws)
        .map(|_| {
            let s = two_stage_sample(&pop, &cfg, &mut rng).unwrap();
            let f = sample_frame(&pop, &s, vec![true; s.units.len()]).unwrap();
            let (_, mut solve) = hard_calibrate(&f, &LossSpec::square(), &Default::default()).unwrap();
            solve.weights = DVector::from_element(s.units.len(), 1.0);
            cluster_estimate(&f, &solve).unwrap()
        })
        .collect();
    let m = est.iter().sum::<f64>() / draws as f64;
    let sd = (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
    let se = sd / (draws as f64).sqrt();
    assert!((m - truth).abs() < 2.0 * se, "bias {} vs se {se}", m - truth);
}

#[test]
fn census_of_one_cluster_is_the_sample_mean() {
    let design = ClusterDesign::new(vec![0; 5], vec![1.0], vec![5]).unwrap();
    let x1 = nalgebra::DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let y: Vec<Option<f64>> = [1.0, 4.0, 2.0, 8.0, 5.0].map(Some).to_vec();
    let f = design.frame(x1, y, vec![true; 5]).unwrap();
    let (_, s) = hard_calibrate(&f, &LossSpec::entropy(), &Default::default()).unwrap();
    assert!((cluster_estimate(&f, &s).unwrap() - 4.0).abs() < 1e-10);
}

#[test]
fn unit_outcome_recovers_population_size() {
    let cfg = small(vec![]);
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let (pop, _) = gen_population(&cfg, &mut rng);
    let s = two_stage_sample(&pop, &cfg, &mut rng).unwrap();
    let delta = gen_selection(&pop, &s.units, cfg.lambda2, &mut rng);
    let y = delta.iter().map(|&d| d.then_some(1.0)).collect();
    let f = sample_frame(&pop, &s, delta).unwrap().with_y(y).unwrap();
    let (_, solve) = hard_calibrate(&f, &LossSpec::maximum_entropy(), &Default::default()).unwrap();
    assert!(solve.converged);
    let total = cluster_estimate(&f, &solve).unwrap() * f.pop_size();
    assert!((total - f.design_weight.sum()).abs() <= 1e-8 * f.pop_size());
}

#[test]
fn table_invariants_and_worker_independence() {
    let cfg = small(EstimatorLabel::ALL.to_vec());
    let one = run_monte_carlo(&cfg, 1).unwrap();
    let three = run_monte_carlo(&cfg, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.to_csv(), three.to_csv());
    let m = one.used as f64;
    for r in &one.rows {
        let v = r.variance.unwrap();
        assert!((r.mse - (r.bias * r.bias + v * (m - 1.0) / m)).abs() <= 1e-12);
        assert!(r.mse >= v * (m - 1.0) / m - 1e-12);
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!(r.mean_var_est >= 0.0);
    }
}

#[test]
fn config_file_uses_documented_names() {
    let cfg: ScenarioConfig = serde_json::from_str(
        r#"{"k": 3, "n_i": 40, "K": 30, "N_i": 50, "lambda1": 0.5, "lambda2": 2,
            "outcome_form": "nonlinear", "reps": 2, "seed": 9, "estimators": ["sim", "soft_me"]}"#,
    )
    .unwrap();
    assert_eq!((cfg.big_k, cfg.big_n_i, cfg.outcome_form), (30, 50, OutcomeForm::Nonlinear));
    assert_eq!(cfg.estimators, vec![EstimatorLabel::Sim, EstimatorLabel::SoftMe]);
    assert!(serde_json::from_str::<ScenarioConfig>(r#"{"kk": 3}"#).is_err());
    let bad = ScenarioConfig { k: 31, ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn simple_mean_is_more_biased_than_hard_calibration() {
    let cfg = ScenarioConfig {
        reps: 40,
        estimators: vec![EstimatorLabel::Sim, EstimatorLabel::Hc],
        ..ScenarioConfig::default()
    };
    let t = run_monte_carlo(&cfg, 0).unwrap();
    let sim = t.get(EstimatorLabel::Sim).unwrap().bias.abs();
    let hc = t.get(EstimatorLabel::Hc).unwrap().bias.abs();
    assert!(sim > hc, "sim {sim} hc {hc}");
}

#[test]
fn null_effect_has_zero_mean_ate() {
    let cfg = ScenarioConfig {
        mode: Mode::Causal,
        ..ScenarioConfig::default()
    };
    let reps = 60;
    let labels = [EstimatorLabel::SoftMe];
    let est: Vec<f64> = (0..reps)
        .filter_map(|rep| {
            let mut rng = ChaCha20Rng::seed_from_u64(500 + rep);
            let (mut pop, _) = gen_population(&cfg, &mut rng);
            pop.y1 = Some(pop.y0.clone());
            let s = two_stage_sample(&pop, &cfg, &mut rng).unwrap();
            let a = gen_selection(&pop, &s.units, cfg.lambda2, &mut rng);
            let f = sample_frame(&pop, &s, a.clone()).unwrap();
            let tune = TuneOptions {
                seed: rep,
                proxy_loss: Some(LossSpec::maximum_entropy()),
                ..Default::default()
            };
            run_causal_battery(&f, &a, &labels, &tune).ok().map(|e| e[0].theta)
        })
        .collect();
    // failed replicates are dropped, as the harness does
    assert!(est.len() as f64 >= 0.95 * reps as f64, "{} of {reps} replicates usable", est.len());
    let m = est.iter().sum::<f64>() / est.len() as f64;
    let sd = (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt();
    assert!(m.abs() < 3.0 * sd / (est.len() as f64).sqrt(), "mean {m} sd {sd}");
}

#[test]
fn weak_outcome_effects_select_larger_gamma() {
    let draw = |lambda1: f64, lambda2: f64, rep: u64| {
        let cfg = ScenarioConfig {
            lambda1,
            lambda2,
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(900 + rep);
        let (pop, _) = gen_population(&cfg, &mut rng);
        let s = two_stage_sample(&pop, &cfg, &mut rng).unwrap();
        let d = gen_selection(&pop, &s.units, lambda2, &mut rng);
        let f = sample_frame(&pop, &s, d).unwrap();
        let tune = TuneOptions {
            seed: rep,
            proxy_loss: Some(LossSpec::maximum_entropy()),
            ..Default::default()
        };
        select_gamma(&f, &LossSpec::maximum_entropy(), &MixedEffectsSpec::identity(f.q(), 1.0), &tune)
            .ok()
            .map(|r| r.gamma_selected)
    };
    let reps = 40;
    let pairs: Vec<(f64, f64)> = (0..reps)
        .filter_map(|r| Some((draw(0.01, 10.0, r)?, draw(0.5, 1.0, r)?)))
        .collect();
    assert!(pairs.len() as f64 >= 0.95 * reps as f64, "{} of {reps} pairs usable", pairs.len());
    let wins = pairs.iter().filter(|(weak, strong)| weak > strong).count();
    assert!(wins as f64 >= 0.8 * pairs.len() as f64, "{wins} of {}", pairs.len());
}

#[test]
fn strong_cluster_effects_penalize_very_large_gamma() {
    // paired replicates: the same sample is calibrated at both γ
    let cfg = ScenarioConfig {
        lambda1: 0.5,
        lambda2: 1.0,
        ..ScenarioConfig::default()
    };
    let me = LossSpec::maximum_entropy();
    let (small_g, large_g) = (1e-3, 1e9);
    let (mut se_small, mut se_large, mut used) = (0.0, 0.0, 0usize);
    for rep in 0..60u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(1300 + rep);
        let (pop, truth) = gen_population(&cfg, &mut rng);
        let s = two_stage_sample(&pop, &cfg, &mut rng).unwrap();
        let d = gen_selection(&pop, &s.units, cfg.lambda2, &mut rng);
        let f = sample_frame(&pop, &s, d).unwrap();
        let spec = MixedEffectsSpec::identity(f.q(), 1.0);
        let fit = |g: f64| {
            let (_, sol) = soft_calibrate(&f, &me, &spec.with_gamma(g), &SolverOptions::default()).ok()?;
            sol.converged.then(|| weighted_mean(&f, &sol.weights).ok()).flatten()
        };
        if let (Some(a), Some(b)) = (fit(small_g), fit(large_g)) {
            se_small += (a - truth).powi(2);
            se_large += (b - truth).powi(2);
            used += 1;
        }
    }
    assert!(used >= 57, "{used} of 60 replicates usable");
    assert!(se_large > se_small, "large {se_large} vs small {se_small}");
}

#[test]
fn cluster_interval_coverage_at_reduced_scale() {
    let cfg = ScenarioConfig {
        k: 15,
        n_i: 60,
        reps: 300,
        estimators: vec![EstimatorLabel::SoftSq, EstimatorLabel::SoftMe],
        ..ScenarioConfig::default()
    };
    let t = run_monte_carlo(&cfg, 0).unwrap();
    for r in &t.rows {
        assert!((0.90..=0.98).contains(&r.coverage), "{:?} coverage {}", r.label, r.coverage);
    }
}

#[test]
fn causal_soft_estimate_centres_on_tau() {
    let cfg = ScenarioConfig {
        mode: Mode::Causal,
        estimators: vec![EstimatorLabel::SoftMe],
        ..ScenarioConfig::default()
    };
    let t = run_monte_carlo(&cfg, 0).unwrap();
    let bias = t.rows[0].bias;
    assert!(bias.abs() < 0.03, "bias {bias}");
}
