use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use survborrow::eif::EifContext;
use survborrow::nuisance::{expit, fit_cox, fit_logistic, SurvivalData};
use survborrow::selector::pseudo_outcome;
use survborrow::sim::{oracle_nuisances, simulate_with_latent};
use survborrow::{load_dataset, write_dataset, Dataset, Setting, SimulationConfig, SubjectRecord, TimeGrid};

fn record_strategy(p: usize) -> impl Strategy<Value = (f64, u8, u8, u8, Vec<f64>)> {
    (0.0f64..50.0, 0u8..2, 0u8..2, 0u8..2, prop::collection::vec(-1e3f64..1e3, p))
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..5).prop_flat_map(|p| {
        prop::collection::vec(record_strategy(p), 1..40).prop_map(move |rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (y, delta, a, r, x))| SubjectRecord { id: 3 * i as u64 + 7, y, delta, a: a * r, x, r })
                .collect();
            Dataset::new(records, Dataset::default_names(p)).unwrap()
        })
    })
}

fn log_lik(x: &[f64], y: &[u8], b0: f64, b1: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = b0 + b1 * xi;
            // log(1 + e^η) computed stably
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            yi as f64 * eta - softplus
        })
        .sum()
}

/// Coarse-to-fine grid search for the two-parameter logistic MLE; the log
/// likelihood is concave, so the fine pass around the coarse optimum is exact
/// to the fine step.
fn grid_argmax(x: &[f64], y: &[u8]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..=600 {
        for j in 0..=600 {
            let (b0, b1) = (-3.0 + 0.01 * i as f64, -3.0 + 0.01 * j as f64);
            let ll = log_lik(x, y, b0, b1);
            if ll > best.0 {
                best = (ll, b0, b1);
            }
        }
    }
    let (c0, c1) = (best.1, best.2);
    for i in -200..=200 {
        for j in -200..=200 {
            let (b0, b1) = (c0 + 1e-4 * i as f64, c1 + 1e-4 * j as f64);
            let ll = log_lik(x, y, b0, b1);
            if ll > best.0 {
                best = (ll, b0, b1);
            }
        }
    }
    (best.1, best.2)
}

#[test]
fn logistic_matches_grid_search() {
    let x = [
        -1.8, -1.4, -1.1, -0.9, -0.7, -0.5, -0.3, -0.2, -0.1, 0.0, 0.1, 0.25, 0.4, 0.55, 0.7, 0.9, 1.1, 1.3, 1.6, 2.0,
    ];
    let y = [0u8, 0, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1];
    let m = fit_logistic(&x, 1, &y, None).unwrap();
    let (b0, b1) = grid_argmax(&x, &y);
    assert!((m.intercept - b0).abs() < 1e-3, "intercept {} vs grid {}", m.intercept, b0);
    assert!((m.coefficients[0] - b1).abs() < 1e-3, "slope {} vs grid {}", m.coefficients[0], b1);
}

#[test]
fn pseudo_outcomes_centered_without_drift() {
    // Setting 1 externals share the trial control hazard, so ξ has mean zero
    // under the true nuisances.
    let mut cfg = SimulationConfig::new(Setting::SelectionBias, 4_000, 10_000, 2_000);
    cfg.seed = 20_240_611;
    let sim = simulate_with_latent(&cfg).unwrap();
    let grid = TimeGrid::from_observed(&sim.dataset, cfg.tau).unwrap();
    let ns = oracle_nuisances(&cfg, &grid).unwrap();
    let ctx = EifContext::new(&ns, &grid);
    let xi: Vec<f64> = sim
        .dataset
        .records
        .iter()
        .filter(|r| !r.is_trial())
        .map(|r| pseudo_outcome(r, &ctx).unwrap().xi)
        .collect();
    let n = xi.len() as f64;
    let mean = xi.iter().sum::<f64>() / n;
    let sd = (xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mc_se = sd / n.sqrt();
    assert!(mean.abs() < 3.0 * mc_se, "mean ξ {mean} vs 3·se {}", 3.0 * mc_se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(ds in dataset_strategy()) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = load_dataset(buf.as_slice(), ds.p()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn time_grid_invariants(times in prop::collection::vec(-1.0f64..5.0, 0..60), tau in 0.1f64..4.0) {
        let g = TimeGrid::new(times, tau).unwrap();
        let t = g.times();
        prop_assert_eq!(*t.last().unwrap(), tau);
        prop_assert!(t.iter().all(|&v| v > 0.0));
        prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
        let total: f64 = g.widths().iter().sum();
        prop_assert!((total - tau).abs() < 1e-12);
    }

    #[test]
    fn logistic_solves_score_equations(seed in any::<u64>(), n in 40usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 2;
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<u8> = (0..n)
            .map(|i| u8::from(rng.random::<f64>() < expit(0.3 + 0.8 * x[i * p] - 0.5 * x[i * p + 1])))
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let Ok(m) = fit_logistic(&x, p, &y, Some(&w)) else {
            return Err(TestCaseError::reject("degenerate draw"));
        };
        let mut score = [0.0; 3];
        for i in 0..n {
            let resid = w[i] * (y[i] as f64 - m.predict(&x[i * p..(i + 1) * p]));
            score[0] += resid;
            score[1] += resid * x[i * p];
            score[2] += resid * x[i * p + 1];
        }
        prop_assert!(score.iter().all(|s| s.abs() < 1e-8), "score {:?}", score);
        let inside = x.chunks(p).map(|xi| m.predict(xi)).all(|q| q > 0.0 && q < 1.0);
        prop_assert!(inside);
    }

    #[test]
    fn cox_survival_monotone(seed in any::<u64>(), n in 15usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = SurvivalData::with_capacity(n, 2);
        for _ in 0..n {
            let x: [f64; 2] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let t: f64 = -rng.random::<f64>().ln() / (0.5 * x[0] - 0.3 * x[1]).exp();
            let c: f64 = -rng.random::<f64>().ln() * 2.0;
            d.push(t.min(c), t <= c, &x);
        }
        let Ok(m) = fit_cox(&d) else {
            return Err(TestCaseError::reject("degenerate draw"));
        };
        prop_assert!(m.increments().iter().all(|&h| h >= 0.0));
        prop_assert!(m.step_times().windows(2).all(|w| w[0] < w[1]));
        let horizon = m.step_times().last().copied().unwrap_or(1.0) * 1.2;
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            prop_assert_eq!(m.predict_survival(&x, 0.0), 1.0);
            let mut prev = 1.0;
            for k in 1..=40 {
                let t = horizon * k as f64 / 40.0;
                let s = m.predict_survival(&x, t);
                prop_assert!(s <= prev);
                // Positive unless exp(−Λ₀·rr) underflows in f64.
                prop_assert!(s > 0.0 || m.baseline_cumhaz(t) * m.relative_risk(&x) > 700.0);
                prev = s;
            }
        }
    }
}
