//! Monte Carlo checks of the pseudo-outcome and the data-driven comparable
//! set under the lack-of-concurrency scenario, where half of the external
//! controls carry a hazard shift.

use std::collections::HashMap;

use survborrow::estimator::cross_fit;
use survborrow::sim::simulate_with_latent;
use survborrow::{EstimatorOptions, Setting, SimulationConfig};

const TAU: f64 = 2.0;

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pseudo-outcomes of every external, split by the latent drift indicator.
fn xi_by_drift(cfg: &SimulationConfig) -> (Vec<f64>, Vec<f64>, Vec<(bool, bool)>) {
    let sim = simulate_with_latent(cfg).unwrap();
    let drifted: HashMap<u64, bool> =
        sim.dataset.records.iter().zip(&sim.latent).filter(|(r, _)| !r.is_trial()).map(|(r, l)| (r.id, l.delta > 0.0)).collect();
    let opts = EstimatorOptions { bootstrap: 0, ..Default::default() };
    let fit = cross_fit(&sim.dataset, TAU, &opts, cfg.seed).unwrap();
    let sel = fit.selection.expect("externals present");
    let (mut on, mut off, mut picks) = (Vec::new(), Vec::new(), Vec::new());
    for ((id, xi), selected) in sel.ids.iter().zip(&sel.xi).zip(&sel.selected) {
        let d = drifted[id];
        if d {
            on.push(*xi);
        } else {
            off.push(*xi);
        }
        picks.push((d, *selected));
    }
    (on, off, picks)
}

fn large_sample() -> SimulationConfig {
    let mut cfg = SimulationConfig::new(Setting::LackOfConcurrency, 2_000, 5_000, 1_000);
    cfg.seed = 0x5E1E_C701;
    cfg
}

#[test]
fn drifted_externals_have_positive_bias_signal() {
    // ξ = ∫κ₀(·|R=1) − ∫κ₀(·|R=0). Drifted externals fail earlier than
    // comparable trial controls, so their own-source RMST term is smaller
    // and ξ is pushed upwards.
    let (on, _, _) = xi_by_drift(&large_sample());
    let (m, se) = mean_and_se(&on);
    println!("drifted mean xi {m:.4} (se {se:.4})");
    assert!(m > 3.0 * se, "drifted mean ξ {m} not significantly positive");
}

#[test]
fn comparable_externals_centred() {
    let (_, off, _) = xi_by_drift(&large_sample());
    let (m, se) = mean_and_se(&off);
    println!("comparable mean xi {m:.4} (se {se:.4})");
    assert!(m.abs() < 3.0 * se, "comparable mean ξ {m} is {:.1} standard errors from zero", m.abs() / se);
}

#[test]
fn selection_accuracy_under_partial_drift() {
    // Target: ≥ 80% of comparable externals kept and ≤ 20% of drifted ones.
    let (mut kept_off, mut n_off, mut kept_on, mut n_on) = (0usize, 0usize, 0usize, 0usize);
    for rep in 0..100u64 {
        let mut cfg = SimulationConfig::new(Setting::LackOfConcurrency, 400, 500, 200);
        cfg.seed = 0x5E1E_C800 + rep;
        let (_, _, picks) = xi_by_drift(&cfg);
        for (drifted, selected) in picks {
            if drifted {
                n_on += 1;
                kept_on += usize::from(selected);
            } else {
                n_off += 1;
                kept_off += usize::from(selected);
            }
        }
    }
    let keep_off = kept_off as f64 / n_off as f64;
    let keep_on = kept_on as f64 / n_on as f64;
    println!("selected among comparable {keep_off:.3}, among drifted {keep_on:.3}");
    assert!(keep_off >= 0.8, "only {keep_off:.3} of comparable externals selected");
    assert!(keep_on <= 0.2, "{keep_on:.3} of drifted externals selected");
}
