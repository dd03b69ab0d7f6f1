//! Data-generating mechanisms for the five external-control scenarios, intercept
//! calibration and Monte Carlo ground truth.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::data::{Dataset, SubjectRecord, TimeGrid, EXTERNAL, TRIAL};
use crate::error::{Error, Result};
use crate::nuisance::{expit, Covariates, CoxModel, FittedCurve, FittedPropensity, LogisticModel, NuisanceSet};
use crate::rng::{child_rng, derive_seed, rng_from, Rng};

/// Number of common draws used to calibrate intercepts.
pub const CALIBRATION_DRAWS: usize = 200_000;
const CALIBRATION_SEED: u64 = 0x5EED_CA1B;

/// External-control scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// Covariate shift only; externals share the trial control hazard.
    SelectionBias = 1,
    /// A latent factor drives both source membership and hazards.
    UnmeasuredConfounder = 2,
    /// Half of the externals carry a large hazard shift.
    LackOfConcurrency = 3,
    /// Externals have a different covariate effect.
    CovariateEffect = 4,
    /// Time-varying baseline hazards that differ between sources.
    BaselineHazard = 5,
}

impl TryFrom<u8> for Setting {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Setting::SelectionBias,
            2 => Setting::UnmeasuredConfounder,
            3 => Setting::LackOfConcurrency,
            4 => Setting::CovariateEffect,
            5 => Setting::BaselineHazard,
            other => return Err(Error::Config(format!("unknown setting {other}; expected 1-5"))),
        })
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        s as u8
    }
}

fn default_p() -> usize {
    3
}
/// Gives about 40% trial censoring under the `exp(0.1·1ᵀX + β_C)` censoring hazard.
pub const DEFAULT_BETA_C: f64 = -0.7;

fn default_beta_c() -> f64 {
    DEFAULT_BETA_C
}
fn default_tau() -> f64 {
    2.0
}
fn default_log_hr() -> f64 {
    -0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub setting: Setting,
    pub n_trial: usize,
    pub n_external: usize,
    pub n_treated: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_beta_c")]
    pub beta_c: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Log hazard ratio of treatment in the trial.
    #[serde(default = "default_log_hr")]
    pub log_hr_treatment: f64,
}

impl SimulationConfig {
    pub fn new(setting: Setting, n_trial: usize, n_external: usize, n_treated: usize) -> Self {
        SimulationConfig {
            setting,
            n_trial,
            n_external,
            n_treated,
            p: default_p(),
            beta_c: default_beta_c(),
            tau: default_tau(),
            seed: 0,
            log_hr_treatment: default_log_hr(),
        }
    }

    /// Parses `key = value` lines.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimulationConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_treated > self.n_trial {
            return Err(Error::Config(format!("n_treated ({}) exceeds n_trial ({})", self.n_treated, self.n_trial)));
        }
        if self.p == 0 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        if self.n_trial == 0 {
            return Err(Error::Config("n_trial must be positive".into()));
        }
        if !self.beta_c.is_finite() || !self.log_hr_treatment.is_finite() {
            return Err(Error::Config("beta_c and log_hr_treatment must be finite".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn n_total(&self) -> usize {
        self.n_trial + self.n_external
    }
}

/// Shape of a subject-specific hazard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HazardForm {
    /// `λ(t) = rate`.
    Constant(f64),
    /// `λ(t) = rate · t`, so `Λ(t) = rate · t² / 2`.
    Linear(f64),
}

impl HazardForm {
    pub fn rate(&self) -> f64 {
        match *self {
            HazardForm::Constant(r) | HazardForm::Linear(r) => r,
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            HazardForm::Constant(l) => l * t,
            HazardForm::Linear(c) => 0.5 * c * t * t,
        }
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.cumulative(t)).exp()
    }

    /// `∫₀^τ S(t) dt` in closed form.
    pub fn rmst(&self, tau: f64) -> f64 {
        match *self {
            HazardForm::Constant(l) => -(-l * tau).exp_m1() / l,
            HazardForm::Linear(c) => (std::f64::consts::PI / (2.0 * c)).sqrt() * erf(tau * (0.5 * c).sqrt()),
        }
    }
}

/// Inverts `S(T) = u` for the given hazard.
pub fn sample_survival_time(form: HazardForm, u: f64) -> Result<f64> {
    let rate = form.rate();
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Domain(format!("hazard rate must be positive, got {rate}")));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("uniform draw must lie in (0,1), got {u}")));
    }
    Ok(match form {
        HazardForm::Constant(l) => -u.ln() / l,
        HazardForm::Linear(c) => (-2.0 * u.ln() / c).sqrt(),
    })
}

/// Bisection for `α` with `mean_i w_i expit(α + η_i) / mean_i w_i = target`.
pub fn calibrate_intercept(target: f64, eta: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if !(target > 0.01 && target < 0.99) {
        return Err(Error::Calibration(format!("target mean {target} outside (0.01, 0.99)")));
    }
    if eta.is_empty() || weights.is_some_and(|w| w.len() != eta.len()) {
        return Err(Error::Calibration("need one weight per linear-predictor draw".into()));
    }
    let total: f64 = weights.map_or(eta.len() as f64, |w| w.iter().sum());
    let mean = |alpha: f64| -> f64 {
        let s: f64 = match weights {
            None => eta.iter().map(|&e| expit(alpha + e)).sum(),
            Some(w) => eta.iter().zip(w).map(|(&e, &wi)| wi * expit(alpha + e)).sum(),
        };
        s / total - target
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    if mean(lo) > 0.0 || mean(hi) < 0.0 {
        return Err(Error::Calibration(format!("target {target} not bracketed by [-20, 20]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Calibrates against `n_draws` draws from `sampler`.
pub fn calibrate_intercept_with<F>(target: f64, n_draws: usize, seed: u64, mut sampler: F) -> Result<f64>
where
    F: FnMut(&mut Rng) -> f64,
{
    let mut rng = rng_from(seed);
    let eta: Vec<f64> = (0..n_draws).map(|_| sampler(&mut rng)).collect();
    calibrate_intercept(target, &eta, None)
}

/// Calibrated source and treatment intercepts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha_r: f64,
    pub alpha_a: f64,
}

fn draw_x(rng: &mut Rng, p: usize, x: &mut Vec<f64>) {
    x.clear();
    x.extend((0..p).map(|_| { let v: f64 = StandardNormal.sample(rng); v }));
}

/// Draws the latent U (Setting 2 only) so that the stream layout is identical across settings.
fn draw_u(rng: &mut Rng, setting: Setting) -> f64 {
    let u: f64 = StandardNormal.sample(rng);
    if setting == Setting::UnmeasuredConfounder {
        u
    } else {
        0.0
    }
}

/// Intercepts for the configuration, cached by design shape.
pub fn calibration(config: &SimulationConfig) -> Result<Calibration> {
    type Key = (Setting, usize, usize, usize, usize);
    static CACHE: OnceLock<Mutex<HashMap<Key, Calibration>>> = OnceLock::new();
    let key = (config.setting, config.n_trial, config.n_external, config.n_treated, config.p);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(c) = cache.lock().expect("calibration cache poisoned").get(&key) {
        return Ok(*c);
    }

    let n = config.n_total() as f64;
    let mut rng = child_rng(CALIBRATION_SEED, config.p as u64);
    let mut x = Vec::with_capacity(config.p);
    let mut s_draws = Vec::with_capacity(CALIBRATION_DRAWS);
    let mut r_eta = Vec::with_capacity(CALIBRATION_DRAWS);
    for _ in 0..CALIBRATION_DRAWS {
        draw_x(&mut rng, config.p, &mut x);
        let u = draw_u(&mut rng, config.setting);
        let s: f64 = x.iter().sum();
        s_draws.push(s);
        r_eta.push(s + u);
    }
    let p_trial = config.n_trial as f64 / n;
    let alpha_r = if config.n_external == 0 {
        f64::INFINITY
    } else {
        calibrate_intercept(p_trial, &r_eta, None)?
    };
    // A is calibrated over X | R=1, i.e. weighting each draw by P(R=1|X,U).
    let weights: Vec<f64> = r_eta.iter().map(|&e| if alpha_r.is_finite() { expit(alpha_r + e) } else { 1.0 }).collect();
    let p_treated = config.n_treated as f64 / config.n_trial as f64;
    let alpha_a = if config.n_treated == 0 {
        f64::NEG_INFINITY
    } else if config.n_treated == config.n_trial {
        f64::INFINITY
    } else {
        calibrate_intercept(p_treated, &s_draws, Some(&weights))?
    };
    let c = Calibration { alpha_r, alpha_a };
    cache.lock().expect("calibration cache poisoned").insert(key, c);
    Ok(c)
}

/// Latent variables of one simulated subject; never exported.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latent {
    pub u: f64,
    pub delta: f64,
}

/// True event hazard of a subject.
pub fn event_hazard(config: &SimulationConfig, a: u8, r: u8, s: f64, latent: Latent) -> HazardForm {
    let lhr = config.log_hr_treatment * a as f64;
    let trial = r == TRIAL;
    match config.setting {
        Setting::SelectionBias => HazardForm::Constant((lhr - 0.2 * s).exp()),
        Setting::UnmeasuredConfounder => {
            let shift = if trial { 3.0 * latent.u } else { 3.0 * (latent.u + 1.0) };
            HazardForm::Constant((lhr - 0.2 * s + shift).exp())
        }
        Setting::LackOfConcurrency => {
            let shift = if trial { 0.0 } else { 3.0 * latent.delta };
            HazardForm::Constant((lhr - 0.2 * s + shift).exp())
        }
        Setting::CovariateEffect => {
            if trial {
                HazardForm::Constant((lhr - 0.2 * s).exp())
            } else {
                HazardForm::Constant((-0.5 * s).exp())
            }
        }
        Setting::BaselineHazard => {
            if trial {
                HazardForm::Linear((lhr - 0.2 * s).exp())
            } else {
                HazardForm::Linear(2.0 * (-0.2 * s).exp())
            }
        }
    }
}

/// True censoring hazard (identical in both sources).
pub fn censoring_hazard(config: &SimulationConfig, s: f64) -> HazardForm {
    HazardForm::Constant((0.1 * s + config.beta_c).exp())
}

fn open_unit(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// A simulated dataset together with its unexported latent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub dataset: Dataset,
    pub latent: Vec<Latent>,
}

/// Draws a dataset with exactly the configured cell sizes.
///
/// Subjects are generated from the population model and accepted while their
/// (R, A) cell still has room, so every cell is an i.i.d. sample from its
/// conditional covariate distribution.
pub fn simulate_with_latent(config: &SimulationConfig) -> Result<Simulated> {
    config.validate()?;
    let cal = calibration(config)?;
    let mut rng = rng_from(config.seed);
    let mut quota = [config.n_external, config.n_trial - config.n_treated, config.n_treated];
    let n = config.n_total();
    let mut records = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let max_attempts = 2_000 * n.max(1) + 100_000;
    let mut x = Vec::with_capacity(config.p);
    let mut attempts = 0;

    while records.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Calibration("rejection sampling could not fill the design cells".into()));
        }
        draw_x(&mut rng, config.p, &mut x);
        let u = draw_u(&mut rng, config.setting);
        let s: f64 = x.iter().sum();
        let r = if rng.random::<f64>() < expit(cal.alpha_r + s + u) { TRIAL } else { EXTERNAL };
        let a = if r == TRIAL && rng.random::<f64>() < expit(cal.alpha_a + s) { 1 } else { 0 };
        let cell = if r == EXTERNAL { 0 } else { 1 + a as usize };
        if quota[cell] == 0 {
            continue;
        }
        quota[cell] -= 1;
        let delta = if config.setting == Setting::LackOfConcurrency && r == EXTERNAL && rng.random::<bool>() {
            5.0
        } else {
            0.0
        };
        let lat = Latent { u, delta };
        let t = sample_survival_time(event_hazard(config, a, r, s, lat), open_unit(&mut rng))?;
        let c = sample_survival_time(censoring_hazard(config, s), open_unit(&mut rng))?;
        records.push(SubjectRecord {
            id: records.len() as u64 + 1,
            y: t.min(c),
            delta: u8::from(t < c),
            a,
            x: x.clone(),
            r,
        });
        latent.push(lat);
    }
    let dataset = Dataset::new(records, Dataset::default_names(config.p))?;
    Ok(Simulated { dataset, latent })
}

pub fn simulate(config: &SimulationConfig) -> Result<Dataset> {
    Ok(simulate_with_latent(config)?.dataset)
}

/// Conditional RMST difference `∫₀^τ {S₁(t|x) − S₀(t|x)} dt` in the trial.
pub fn conditional_rmst_difference(config: &SimulationConfig, x: &[f64], latent: Latent, tau: f64) -> f64 {
    let s: f64 = x.iter().sum();
    event_hazard(config, 1, TRIAL, s, latent).rmst(tau) - event_hazard(config, 0, TRIAL, s, latent).rmst(tau)
}

/// Monte Carlo estimate of the trial-population RMST difference and its standard error.
///
/// Draws come from the population covariate law and are importance-weighted
/// by `P(R=1|X,U)`, which yields the `X | R=1` average.
pub fn true_theta_with_se(config: &SimulationConfig, tau: f64, n_mc: usize) -> Result<(f64, f64)> {
    config.validate()?;
    if n_mc < 100_000 {
        return Err(Error::Config(format!("n_mc must be at least 100000, got {n_mc}")));
    }
    let cal = calibration(config)?;
    let mut rng = child_rng(config.seed, 0x7E57);
    let mut x = Vec::with_capacity(config.p);
    let (mut sw, mut swv, mut sww, mut swwv, mut swwvv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        draw_x(&mut rng, config.p, &mut x);
        let u = draw_u(&mut rng, config.setting);
        let s: f64 = x.iter().sum();
        let w = if cal.alpha_r.is_finite() { expit(cal.alpha_r + s + u) } else { 1.0 };
        let v = conditional_rmst_difference(config, &x, Latent { u, delta: 0.0 }, tau);
        sw += w;
        swv += w * v;
        sww += w * w;
        swwv += w * w * v;
        swwvv += w * w * v * v;
    }
    let theta = swv / sw;
    // Delta-method standard error of the self-normalised weighted mean.
    let resid2 = (swwvv - 2.0 * theta * swwv + theta * theta * sww).max(0.0);
    let se = resid2.sqrt() / sw;
    Ok((theta, se))
}

pub fn true_theta(config: &SimulationConfig, tau: f64, n_mc: usize) -> Result<f64> {
    Ok(true_theta_with_se(config, tau, n_mc)?.0)
}

/// Expected fraction of censored trial subjects, `E[λ_C/(λ_C+λ_T) | R=1]`, for the
/// constant-hazard settings without latent shifts.
pub fn expected_trial_censoring(config: &SimulationConfig, n_mc: usize) -> Result<f64> {
    let cal = calibration(config)?;
    let mut rng = child_rng(config.seed, 0xC3);
    let mut x = Vec::with_capacity(config.p);
    let (mut sw, mut swv) = (0.0, 0.0);
    for _ in 0..n_mc {
        draw_x(&mut rng, config.p, &mut x);
        let u = draw_u(&mut rng, config.setting);
        let s: f64 = x.iter().sum();
        let wr = if cal.alpha_r.is_finite() { expit(cal.alpha_r + s + u) } else { 1.0 };
        let pa = expit(cal.alpha_a + s);
        let lc = censoring_hazard(config, s).rate();
        let frac = |a: u8| {
            let lt = event_hazard(config, a, TRIAL, s, Latent { u, delta: 0.0 }).rate();
            lc / (lc + lt)
        };
        sw += wr;
        swv += wr * (pa * frac(1) + (1.0 - pa) * frac(0));
    }
    Ok(swv / sw)
}

fn stepped(coefficients: Vec<f64>, grid: &TimeGrid, cumhaz: impl Fn(f64) -> f64) -> Result<CoxModel> {
    let mut prev = 0.0;
    let steps = grid
        .times()
        .iter()
        .map(|&t| {
            let c = cumhaz(t);
            let h = c - prev;
            prev = c;
            (t, h)
        })
        .collect();
    CoxModel::from_parts(coefficients, steps)
}

/// The data-generating nuisance functions, discretised on `grid`.
///
/// Available for the proportional-hazards settings without latent variables
/// (1, 4 and 5).
pub fn oracle_nuisances(config: &SimulationConfig, grid: &TimeGrid) -> Result<NuisanceSet> {
    let p = config.p;
    let (shape, ext_coef, ext_scale): (fn(f64) -> f64, f64, f64) = match config.setting {
        Setting::SelectionBias => (|t| t, -0.2, 1.0),
        Setting::CovariateEffect => (|t| t, -0.5, 1.0),
        Setting::BaselineHazard => (|t| 0.5 * t * t, -0.2, 2.0),
        other => {
            return Err(Error::Config(format!("no oracle nuisances for setting {}", other as u8)));
        }
    };
    let cal = calibration(config)?;
    let full = |m: CoxModel, with_arm: bool| FittedCurve::new(m, Covariates::Full, with_arm);
    let hr1 = config.log_hr_treatment.exp();
    let surv_treated = full(stepped(vec![-0.2; p], grid, |t| hr1 * shape(t))?, false);
    let surv_control = full(stepped(vec![-0.2; p], grid, shape)?, false);
    let surv_external = full(stepped(vec![ext_coef; p], grid, |t| ext_scale * shape(t))?, false);
    let lc = config.beta_c.exp();
    let mut trial_c = vec![0.1; p];
    trial_c.push(0.0);
    let cens_trial = full(stepped(trial_c, grid, |t| lc * t)?, true);
    let cens_external = full(stepped(vec![0.1; p], grid, |t| lc * t)?, false);
    let pi_r = FittedPropensity { model: LogisticModel::from_parts(cal.alpha_r, vec![1.0; p]), covariates: Covariates::Full };
    let pi_a = FittedPropensity { model: LogisticModel::from_parts(cal.alpha_a, vec![1.0; p]), covariates: Covariates::Full };
    Ok(NuisanceSet {
        surv_treated,
        surv_control,
        surv_external: Some(surv_external),
        cens_trial,
        cens_external: Some(cens_external),
        pi_r: Some(pi_r),
        pi_a,
        p_r1: config.n_trial as f64 / config.n_total() as f64,
    })
}

/// Seed for replication `rep` of a study whose master seed is `master`.
pub fn replication_seed(master: u64, rep: u64) -> u64 {
    derive_seed(master, rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(setting: Setting) -> SimulationConfig {
        SimulationConfig::new(setting, 400, 500, 200)
    }

    #[test]
    fn inversion_examples() {
        let t = sample_survival_time(HazardForm::Constant(1.0), 0.5).unwrap();
        assert!((t - std::f64::consts::LN_2).abs() < 1e-12);
        let t = sample_survival_time(HazardForm::Linear(2.0), (-1f64).exp()).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(matches!(sample_survival_time(HazardForm::Constant(0.0), 0.5), Err(Error::Domain(_))));
        assert!(matches!(sample_survival_time(HazardForm::Linear(-1.0), 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn constant_rate_moments() {
        let mut rng = rng_from(11);
        let lambda = 1.7;
        let n = 1_000_000;
        let (mut sum_t, mut sum_cum) = (0.0, 0.0);
        for _ in 0..n {
            let t = sample_survival_time(HazardForm::Constant(lambda), open_unit(&mut rng)).unwrap();
            sum_t += t;
            sum_cum += HazardForm::Constant(lambda).cumulative(t);
        }
        let mean = sum_t / n as f64;
        assert!((mean * lambda - 1.0).abs() < 0.005, "mean {mean}");
        let mean_cum = sum_cum / n as f64;
        assert!((0.995..=1.005).contains(&mean_cum), "{mean_cum}");
    }

    #[test]
    fn calibration_examples() {
        let eta: Vec<f64> = (0..1000).map(|i| (i as f64 - 499.5) / 100.0).collect();
        assert!(calibrate_intercept(0.5, &eta, None).unwrap().abs() < 0.02);
        let ones = vec![1.0; 100];
        assert!((calibrate_intercept(0.5, &ones, None).unwrap() + 1.0).abs() < 0.02);
        assert!(calibrate_intercept(0.995, &ones, None).is_err());
    }

    #[test]
    fn calibration_matches_independent_bisection() {
        let alpha = calibrate_intercept_with(0.3, 100_000, 5, |r| StandardNormal.sample(r)).unwrap();
        // Independent oracle: 10^6 draws from a different stream, plain bisection.
        let mut rng = rng_from(987_654);
        let eta: Vec<f64> = (0..1_000_000).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect();
        let (mut lo, mut hi) = (-20.0f64, 20.0f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let m: f64 = eta.iter().map(|e| 1.0 / (1.0 + (-(mid + e)).exp())).sum::<f64>() / eta.len() as f64;
            if m < 0.3 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((alpha - 0.5 * (lo + hi)).abs() < 0.02, "{alpha} vs {lo}");
    }

    #[test]
    fn calibrated_means_hit_targets() {
        let c = cfg(Setting::SelectionBias);
        let cal = calibration(&c).unwrap();
        let mut rng = rng_from(3);
        let (mut r_sum, mut a_num, mut a_den) = (0.0, 0.0, 0.0);
        let mut x = Vec::new();
        let n = 200_000;
        for _ in 0..n {
            draw_x(&mut rng, 3, &mut x);
            let s: f64 = x.iter().sum();
            let pr = expit(cal.alpha_r + s);
            r_sum += pr;
            a_num += pr * expit(cal.alpha_a + s);
            a_den += pr;
        }
        assert!((r_sum / n as f64 - 400.0 / 900.0).abs() < 0.005);
        assert!((a_num / a_den - 0.5).abs() < 0.005);
    }

    #[test]
    fn deterministic_and_exact_counts() {
        let mut c = cfg(Setting::LackOfConcurrency);
        c.seed = 42;
        let a = simulate(&c).unwrap();
        let b = simulate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cell_counts(), [500, 200, 200]);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        crate::data::write_dataset(&a, &mut buf_a).unwrap();
        crate::data::write_dataset(&b, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn records_satisfy_invariants() {
        for s in 1..=5u8 {
            let mut c = cfg(Setting::try_from(s).unwrap());
            c.seed = s as u64;
            let sim = simulate_with_latent(&c).unwrap();
            for (r, l) in sim.dataset.records.iter().zip(&sim.latent) {
                assert!(r.validate().is_ok());
                assert_eq!(r.x.len(), 3);
                if s != 3 || r.is_trial() {
                    assert_eq!(l.delta, 0.0);
                }
            }
        }
    }

    #[test]
    fn unknown_setting_is_config_error() {
        assert!(matches!(Setting::try_from(6), Err(Error::Config(_))));
        let text = "setting = 9\nn_trial = 10\nn_external = 10\nn_treated = 5\n";
        assert!(matches!(SimulationConfig::from_toml_str(text), Err(Error::Config(_))));
    }

    #[test]
    fn parses_key_value_config() {
        let text = "setting = 3\nn_trial = 400\nn_external = 500\nn_treated = 200\np = 3\nbeta_c = 0.0\ntau = 2.0\nseed = 9\n";
        let c = SimulationConfig::from_toml_str(text).unwrap();
        assert_eq!(c.setting, Setting::LackOfConcurrency);
        assert_eq!(c.seed, 9);
        assert_eq!(c.beta_c, 0.0);
        assert!(SimulationConfig::from_toml_str("setting = 1\nn_trial = 4\nn_external = 1\nn_treated = 5\n").is_err());
    }

    #[test]
    fn closed_form_rmst_at_origin() {
        let c = cfg(Setting::SelectionBias);
        let v = conditional_rmst_difference(&c, &[0.0, 0.0, 0.0], Latent::default(), 2.0);
        let l1 = (-0.5f64).exp();
        let want = (1.0 - (-2.0 * l1).exp()) / l1 - (1.0 - (-2f64).exp());
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.293_915_134_991_622).abs() < 1e-12);
    }

    #[test]
    fn linear_hazard_rmst_matches_quadrature() {
        let h = HazardForm::Linear(1.3);
        let n = 200_000;
        let dt = 2.0 / n as f64;
        let quad: f64 = (0..n).map(|k| h.survival((k as f64 + 0.5) * dt) * dt).sum();
        assert!((h.rmst(2.0) - quad).abs() < 1e-8);
    }

    #[test]
    fn null_effect_truth_is_zero() {
        let mut c = cfg(Setting::SelectionBias);
        c.log_hr_treatment = 0.0;
        let (theta, _) = true_theta_with_se(&c, 2.0, 100_000).unwrap();
        assert_eq!(theta, 0.0);
    }

    #[test]
    fn truth_is_seed_stable() {
        let mut c = cfg(Setting::SelectionBias);
        c.seed = 1;
        let a = true_theta(&c, 2.0, 1_000_000).unwrap();
        c.seed = 2;
        let b = true_theta(&c, 2.0, 1_000_000).unwrap();
        assert!((a - b).abs() < 0.005, "{a} {b}");
    }

    #[test]
    fn external_times_match_direct_inversion() {
        // Setting 1 externals against an independent sampler of X | R=0 and T.
        let mut c = SimulationConfig::new(Setting::SelectionBias, 10_000, 10_000, 5_000);
        c.seed = 17;
        c.beta_c = -50.0; // effectively no censoring, so Y = T
        let d = simulate(&c).unwrap();
        let mut ours: Vec<f64> = d.records.iter().filter(|r| !r.is_trial()).map(|r| r.y).collect();
        let cal = calibration(&c).unwrap();
        let mut rng = rng_from(99);
        let mut oracle = Vec::new();
        while oracle.len() < 10_000 {
            let s: f64 = (0..3).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).sum::<f64>();
            let u: f64 = rng.random();
            if u < expit(cal.alpha_r + s) {
                continue;
            }
            let e: f64 = rand_distr::Exp1.sample(&mut rng);
            oracle.push(e / (-0.2 * s).exp());
        }
        ours.sort_by(f64::total_cmp);
        oracle.sort_by(f64::total_cmp);
        let ks = ks_statistic(&ours, &oracle);
        assert!(ks < 0.02, "KS = {ks}");
    }

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn drifted_externals_fail_earlier() {
        // Empirical survival of Setting 2/3 externals lies below Setting 1 at identical x.
        let n = 100_000;
        let c1 = cfg(Setting::SelectionBias);
        let mut rng = rng_from(5);
        let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 0.1).collect();
        for setting in [Setting::UnmeasuredConfounder, Setting::LackOfConcurrency] {
            let c = cfg(setting);
            let (mut base, mut drift) = (vec![0usize; grid.len()], vec![0usize; grid.len()]);
            for _ in 0..n {
                let s: f64 = (0..3).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).sum::<f64>();
                let u: f64 = StandardNormal.sample(&mut rng);
                let lat = Latent { u, delta: if rng.random::<bool>() { 5.0 } else { 0.0 } };
                let e: f64 = rand_distr::Exp1.sample(&mut rng);
                let h1 = event_hazard(&c1, 0, EXTERNAL, s, lat).rate();
                let h2 = event_hazard(&c, 0, EXTERNAL, s, lat).rate();
                for (k, &t) in grid.iter().enumerate() {
                    base[k] += usize::from(e / h1 > t);
                    drift[k] += usize::from(e / h2 > t);
                }
            }
            for k in 0..grid.len() {
                assert!(drift[k] < base[k], "{setting:?} t={}", grid[k]);
            }
        }
    }

    #[test]
    fn censoring_rate_matches_hazard_formula() {
        let mut c = SimulationConfig::new(Setting::SelectionBias, 10_000, 500, 5_000);
        c.seed = 8;
        for beta_c in [-2.0, 0.0, 1.0] {
            c.beta_c = beta_c;
            let d = simulate(&c).unwrap();
            let trial: Vec<_> = d.records.iter().filter(|r| r.is_trial()).collect();
            let frac = trial.iter().filter(|r| !r.is_event()).count() as f64 / trial.len() as f64;
            let want = expected_trial_censoring(&c, 200_000).unwrap();
            assert!((frac - want).abs() < 0.015, "beta_c={beta_c}: {frac} vs {want}");
        }
    }

    fn trial_censoring_fraction(beta_c: f64) -> f64 {
        let mut c = SimulationConfig::new(Setting::SelectionBias, 10_000, 500, 5_000);
        c.seed = 8;
        c.beta_c = beta_c;
        let d = simulate(&c).unwrap();
        let trial: Vec<_> = d.records.iter().filter(|r| r.is_trial()).collect();
        trial.iter().filter(|r| !r.is_event()).count() as f64 / trial.len() as f64
    }

    #[test]
    fn default_censoring_near_forty_percent() {
        let frac = trial_censoring_fraction(DEFAULT_BETA_C);
        assert!((0.38..=0.42).contains(&frac), "{frac}");
    }

    #[test]
    fn censoring_sweep_levels() {
        // Low and high censoring levels of the sweep: about 20% and 60%.
        let low = trial_censoring_fraction(-2.0);
        let high = trial_censoring_fraction(0.0);
        assert!((0.14..=0.22).contains(&low), "{low}");
        assert!((0.52..=0.62).contains(&high), "{high}");
        // beta_c = 1 taken literally leaves almost everyone censored.
        assert!(trial_censoring_fraction(1.0) > 0.7);
    }

    #[test]
    fn oracle_set_only_for_ph_settings() {
        let c = cfg(Setting::UnmeasuredConfounder);
        let grid = TimeGrid::new(vec![0.5, 1.0], 2.0).unwrap();
        assert!(oracle_nuisances(&c, &grid).is_err());
        let o = oracle_nuisances(&cfg(Setting::SelectionBias), &grid).unwrap();
        let s = o.surv_control.survival(crate::nuisance::Features { x: &[0.0; 3], a: 0 }, 1.0);
        assert!((s - (-1f64).exp()).abs() < 1e-12);
    }
}
