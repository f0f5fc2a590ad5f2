use proptest::prelude::*;
use relperf_core::chaos_lab::{log_log_slope, run_experiment, spearman, xi_error, ChaosConfig, XiLaw, METRICS};
use relperf_core::graphon::{normalized_weights, sample_interaction_graph, Graphon, StepGraphon};
use relperf_core::Error;
use serde_json::json;

fn config(sigma_star: f64, extra: serde_json::Value) -> ChaosConfig {
    let mut v = json!({
        "graphon": {"kernel": "constant", "p": 0.5},
        "n_schedule": [4, 8, 16],
        "beta_rule": {"rule": "constant", "beta": 1.0},
        "reps": 3,
        "seed": 5,
        "coeffs": {"sigma": [1.0], "sigma_star": [sigma_star], "theta": [0.2], "eta": 0.5, "xi": 1.0, "constraint": {"type": "full_space"}},
        "tgrid": {"horizon": 1.0, "steps": 4},
        "labels": 32,
        "xi_draws": 20
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    serde_json::from_value(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn slope_recovers_power_laws(a in -3.0..3.0f64, c in 0.1..10.0f64) {
        let x = [2.0, 4.0, 8.0, 16.0, 32.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| c * v.powf(a)).collect();
        prop_assert!((log_log_slope(&x, &y).unwrap() - a).abs() < 1e-10);
    }

    #[test]
    fn spearman_is_rank_invariant(v in proptest::collection::vec(-5.0..5.0f64, 3..20)) {
        let w: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        if let Some(r) = spearman(&v, &w) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn xi_error_without_spread_is_the_degree_gap(seed in any::<u64>(), n in 3usize..30, m in -2.0..2.0f64) {
        let g = sample_interaction_graph(&StepGraphon::constant(1, 0.5).unwrap(), n, 1.0, seed).unwrap();
        let w = normalized_weights(&g).unwrap();
        let e = xi_error(&w, &Graphon::constant(0.5), XiLaw { mean: m, sd: 0.0 }, 3, seed).unwrap();
        let expect = m * m * (0..n).map(|i| (w.row_sum(i) - 0.5).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((e.value - expect).abs() < 1e-12 * (1.0 + expect));
    }
}

#[test]
fn no_common_noise_means_no_strategy_error() {
    let r = run_experiment(&config(0.0, json!({}))).unwrap();
    for p in &r.per_n {
        assert_eq!(p.strategy_error, 0.0);
        assert_eq!(p.gamma_star_error, 0.0);
    }
}

#[test]
fn experiments_are_reproducible_and_nonnegative() {
    let cfg = config(0.8, json!({}));
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    for c in &a.cells {
        assert!(c.metrics.unwrap().iter().all(|x| *x >= 0.0 && x.is_finite()));
    }
    let rows = a.to_csv().lines().count() - 1;
    assert_eq!(rows, 3 * 3 * METRICS.len());
    assert_eq!(a.to_dat().lines().count(), 4);
}

#[test]
fn seed_changes_the_samples() {
    let a = run_experiment(&config(0.8, json!({}))).unwrap();
    let b = run_experiment(&config(0.8, json!({"seed": 6}))).unwrap();
    assert_ne!(a.per_n[0].strategy_error, b.per_n[0].strategy_error);
}

#[test]
fn too_many_rejections_abort_the_experiment() {
    // a complete graph with β = 0.3 has row sums 1/0.3 > 1
    let cfg = config(0.8, json!({"graphon": {"kernel": "constant", "p": 1.0}, "n_schedule": [3], "beta_rule": {"rule": "constant", "beta": 0.3}, "max_retries": 0}));
    assert!(matches!(run_experiment(&cfg), Err(Error::Experiment(_))));
}

#[test]
fn unknown_keys_are_rejected() {
    let mut v = serde_json::to_value(config(0.5, json!({}))).unwrap();
    v["repetitions"] = json!(3);
    assert!(serde_json::from_value::<ChaosConfig>(v).is_err());
}
