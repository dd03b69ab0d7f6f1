//! Monte Carlo benchmark harness and the subsampling probability-of-study-success analysis.

use std::io::Write;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, SubjectRecord};
use crate::eif::csv_err;
use crate::error::{Error, Result};
use crate::estimator::{estimate_all, wald_interval, EstimatorKind, EstimatorOptions};
use crate::rng::{child_rng, derive_seed};
use crate::sim::{simulate, true_theta, SimulationConfig};

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Simulation template; `n_trial` is replaced by `n_treated + n0` per grid value.
    pub base: SimulationConfig,
    pub replications: usize,
    pub kinds: Vec<EstimatorKind>,
    /// Concurrent-control sizes N₀.
    pub n0_grid: Vec<usize>,
    /// Bootstrap size; below 2 runs point estimates only (inference metrics are NaN).
    pub bootstrap: usize,
    /// Power is computed for `H₁: θ > threshold`.
    pub threshold: f64,
    /// One-sided test size.
    pub alpha: f64,
    pub truth_draws: usize,
    pub estimator: EstimatorOptions,
}

impl BenchmarkConfig {
    pub fn new(base: SimulationConfig) -> Self {
        BenchmarkConfig {
            base,
            replications: 200,
            kinds: EstimatorKind::ALL.to_vec(),
            n0_grid: vec![200],
            bootstrap: 50,
            threshold: -0.3,
            alpha: 0.05,
            truth_draws: 1_000_000,
            estimator: EstimatorOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !self.threshold.is_finite() && self.threshold != f64::NEG_INFINITY {
            return Err(Error::Config("threshold must be finite".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.kinds.is_empty() || self.n0_grid.is_empty() {
            return Err(Error::Config("need at least one estimator and one N0 value".into()));
        }
        self.base.validate()
    }

    fn sim_config(&self, n0: usize) -> SimulationConfig {
        let mut c = self.base.clone();
        c.n_trial = c.n_treated + n0;
        c
    }
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindOutcome {
    pub kind: EstimatorKind,
    pub theta: f64,
    pub se: f64,
    pub n_borrowed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub n0: usize,
    pub replication: usize,
    pub seed: u64,
    pub n_external: usize,
    pub outcomes: Vec<KindOutcome>,
}

impl ReplicationRecord {
    pub fn outcome(&self, kind: EstimatorKind) -> Option<&KindOutcome> {
        self.outcomes.iter().find(|o| o.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: u8,
    pub estimator: EstimatorKind,
    pub n0: usize,
    pub truth: f64,
    pub bias: f64,
    pub se: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub type1: f64,
    pub power: f64,
    pub borrow_frac: f64,
    pub rel_ci_width: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, kind: EstimatorKind, n0: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == kind && r.n0 == n0)
    }

    /// Writes `setting,estimator,n0,bias,se,rmse,coverage,type1,power,borrow_frac,rel_ci_width`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "setting", "estimator", "n0", "bias", "se", "rmse", "coverage", "type1", "power", "borrow_frac", "rel_ci_width",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.setting.to_string(),
                r.estimator.to_string(),
                r.n0.to_string(),
                r.bias.to_string(),
                r.se.to_string(),
                r.rmse.to_string(),
                r.coverage.to_string(),
                r.type1.to_string(),
                r.power.to_string(),
                r.borrow_frac.to_string(),
                r.rel_ci_width.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub table: MetricsTable,
    pub replications: Vec<ReplicationRecord>,
    pub failures: usize,
}

fn run_replication(config: &BenchmarkConfig, n0: usize, rep: usize) -> Result<ReplicationRecord> {
    let mut sim = config.sim_config(n0);
    let seed = derive_seed(derive_seed(config.base.seed, n0 as u64), rep as u64);
    sim.seed = seed;
    let data = simulate(&sim)?;
    let mut opts = config.estimator.clone();
    opts.bootstrap = config.bootstrap;
    let est = estimate_all(&data, sim.tau, &opts, seed)?;
    let outcomes = config
        .kinds
        .iter()
        .map(|&kind| {
            let theta = est.point.theta(kind).ok_or_else(|| Error::Benchmark(format!("{kind} estimate missing")))?;
            let se = est.draws.as_ref().map_or(f64::NAN, |d| d.se(kind));
            Ok(KindOutcome { kind, theta, se, n_borrowed: est.point.n_borrowed(kind) })
        })
        .collect::<Result<_>>()?;
    Ok(ReplicationRecord { n0, replication: rep, seed, n_external: sim.n_external, outcomes })
}

/// Aggregates replications of one (estimator, N₀) cell against `truth`.
pub fn summarize(
    setting: u8,
    kind: EstimatorKind,
    n0: usize,
    truth: f64,
    reps: &[&ReplicationRecord],
    threshold: f64,
    alpha: f64,
    level: f64,
) -> MetricsRow {
    let z_test = Normal::standard().inverse_cdf(1.0 - alpha);
    let outs: Vec<(&KindOutcome, usize)> = reps.iter().filter_map(|r| r.outcome(kind).map(|o| (o, r.n_external))).collect();
    let n = outs.len() as f64;
    let mean = |f: &dyn Fn(&KindOutcome, usize) -> f64| outs.iter().map(|(o, ne)| f(o, *ne)).sum::<f64>() / n;
    let mean_theta = mean(&|o, _| o.theta);
    let bias = mean_theta - truth;
    let se = mean(&|o, _| (o.theta - mean_theta).powi(2)).sqrt();
    let rmse = mean(&|o, _| (o.theta - truth).powi(2)).sqrt();
    let coverage = mean(&|o, _| {
        let (lo, hi) = wald_interval(o.theta, o.se, level);
        f64::from(u8::from(lo <= truth && truth <= hi)) + if o.se.is_nan() { f64::NAN } else { 0.0 }
    });
    let reject = |o: &KindOutcome, null: f64| -> f64 {
        if o.se.is_nan() {
            f64::NAN
        } else {
            f64::from(u8::from(o.theta - z_test * o.se > null))
        }
    };
    let type1 = mean(&|o, _| reject(o, truth));
    let power = mean(&|o, _| reject(o, threshold));
    let borrow_frac = mean(&|o, ne| if ne == 0 { 0.0 } else { o.n_borrowed as f64 / ne as f64 });
    let width = mean(&|o, _| {
        let (lo, hi) = wald_interval(o.theta, o.se, level);
        hi - lo
    });
    MetricsRow {
        setting,
        estimator: kind,
        n0,
        truth,
        bias,
        se,
        rmse,
        coverage,
        type1,
        power,
        borrow_frac,
        rel_ci_width: width,
    }
}

/// Simulates, estimates and aggregates every (estimator, N₀) cell.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let mut table = MetricsTable::default();
    let mut all = Vec::new();
    let mut failures = 0;
    for &n0 in &config.n0_grid {
        let sim = config.sim_config(n0);
        sim.validate()?;
        let mut truth_cfg = sim.clone();
        truth_cfg.seed = derive_seed(config.base.seed, 0x7EE7);
        let truth = true_theta(&truth_cfg, sim.tau, config.truth_draws)?;

        let results: Vec<Result<ReplicationRecord>> =
            (0..config.replications).into_par_iter().map(|rep| run_replication(config, n0, rep)).collect();
        let mut reps = Vec::with_capacity(results.len());
        let mut failed = 0;
        for (rep, r) in results.into_iter().enumerate() {
            match r {
                Ok(rec) => reps.push(rec),
                Err(e) => {
                    log::warn!("replication {rep} (N0={n0}) failed: {e}");
                    failed += 1;
                }
            }
        }
        if failed as f64 > MAX_FAILURE_RATE * config.replications as f64 {
            return Err(Error::Benchmark(format!(
                "{failed} of {} replications failed at N0={n0}, above the {:.0}% limit",
                config.replications,
                100.0 * MAX_FAILURE_RATE
            )));
        }
        failures += failed;

        let refs: Vec<&ReplicationRecord> = reps.iter().collect();
        let mut rows: Vec<MetricsRow> = config
            .kinds
            .iter()
            .map(|&k| {
                summarize(
                    config.base.setting as u8,
                    k,
                    n0,
                    truth,
                    &refs,
                    config.threshold,
                    config.alpha,
                    config.estimator.level,
                )
            })
            .collect();
        let aipw_width = rows.iter().find(|r| r.estimator == EstimatorKind::Aipw).map(|r| r.rel_ci_width);
        for r in &mut rows {
            r.rel_ci_width = match aipw_width {
                Some(w) => r.rel_ci_width / w,
                None => f64::NAN,
            };
        }
        table.rows.extend(rows);
        all.extend(reps);
    }
    Ok(BenchmarkResult { table, replications: all, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrssRow {
    pub n0: usize,
    pub tau: f64,
    pub threshold: f64,
    pub prss_aipw: f64,
    pub prss_adapt: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrssTable {
    pub rows: Vec<PrssRow>,
}

impl PrssTable {
    /// Writes `n0,tau,threshold,prss_aipw,prss_adapt`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["n0", "tau", "threshold", "prss_aipw", "prss_adapt"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.n0.to_string(),
                r.tau.to_string(),
                r.threshold.to_string(),
                r.prss_aipw.to_string(),
                r.prss_adapt.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrssConfig {
    pub subsample_sizes: Vec<usize>,
    pub repeats: usize,
    /// Success means detecting `θ < threshold`.
    pub thresholds: Vec<f64>,
    pub taus: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub estimator: EstimatorOptions,
}

/// Keeps every treated subject and external, plus `n0` randomly drawn trial controls.
pub fn control_subsample(dataset: &Dataset, n0: usize, seed: u64) -> Result<Dataset> {
    let mut controls: Vec<&SubjectRecord> = dataset.records.iter().filter(|r| r.cell() == 1).collect();
    if n0 > controls.len() {
        return Err(Error::Config(format!("subsample size {n0} exceeds the {} trial controls", controls.len())));
    }
    controls.sort_by_key(|r| r.id);
    let mut picked: Vec<usize> = sample(&mut child_rng(seed, 0), controls.len(), n0).into_vec();
    picked.sort_unstable();
    let mut records: Vec<SubjectRecord> = dataset.records.iter().filter(|r| r.cell() != 1).cloned().collect();
    records.extend(picked.into_iter().map(|i| controls[i].clone()));
    records.sort_by_key(|r| r.id);
    Dataset::new(records, dataset.covariate_names.clone())
}

/// Empirical probability that a one-sided Wald test detects `θ_τ < threshold`,
/// for AIPW and the adaptive estimator over repeated control subsamples.
pub fn run_prss(dataset: &Dataset, config: &PrssConfig) -> Result<PrssTable> {
    dataset.require_both_arms()?;
    dataset.require_externals()?;
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let n_controls = dataset.cell_counts()[1];
    if let Some(&bad) = config.subsample_sizes.iter().find(|&&n| n > n_controls) {
        return Err(Error::Config(format!("subsample size {bad} exceeds the {n_controls} trial controls")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - config.alpha);
    let mut table = PrssTable::default();
    for &n0 in &config.subsample_sizes {
        for &tau in &config.taus {
            let runs: Vec<(f64, f64, f64, f64)> = (0..config.repeats as u64)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(derive_seed(config.seed, n0 as u64), rep);
                    let sub = control_subsample(dataset, n0, seed)?;
                    let est = estimate_all(&sub, tau, &config.estimator, seed)?;
                    let draws = est.draws.as_ref().ok_or_else(|| Error::Config("PrSS needs a bootstrap size of at least 2".into()))?;
                    let adapt = est.point.adapt.expect("externals present");
                    Ok((est.point.aipw, draws.se(EstimatorKind::Aipw), adapt, draws.se(EstimatorKind::Adapt)))
                })
                .collect::<Result<_>>()?;
            for &thr in &config.thresholds {
                let rate = |f: &dyn Fn(&(f64, f64, f64, f64)) -> bool| runs.iter().filter(|r| f(r)).count() as f64 / runs.len() as f64;
                table.rows.push(PrssRow {
                    n0,
                    tau,
                    threshold: thr,
                    prss_aipw: rate(&|r| r.0 + z * r.1 < thr),
                    prss_adapt: rate(&|r| r.2 + z * r.3 < thr),
                });
            }
        }
    }
    Ok(table)
}
