//! Nuisance-function fitters: Cox models for event and censoring times,
//! logistic propensities, and the Kaplan–Meier / log-rank descriptives.

pub mod cox;
pub mod km;
pub mod logistic;

pub use cox::{fit_cox, CoxModel, SurvivalData};
pub use km::{km_curve, logrank_test, StepSurvival};
pub use logistic::{expit, fit_logistic, logit, LogisticModel};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord};
use crate::error::{Error, Result};

/// Floor/ceiling applied to probabilities that end up in denominators.
pub const PROB_CLAMP: f64 = 1e-3;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Which covariates a learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariates {
    /// All baseline covariates (plus the arm for the trial censoring model).
    #[default]
    Full,
    /// No covariates: intercept-only logistic, Nelson–Aalen baseline for Cox.
    InterceptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub propensity: Covariates,
    pub outcome: Covariates,
    pub censoring: Covariates,
}

/// Time whose "event" a Cox fit models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Failure,
    Censoring,
}

/// Assembles Cox fitting data from records.
pub fn survival_data(records: &[&SubjectRecord], covariates: Covariates, with_arm: bool, kind: EventKind) -> SurvivalData {
    let p = match covariates {
        Covariates::Full => records.first().map_or(0, |r| r.x.len()) + usize::from(with_arm),
        Covariates::InterceptOnly => 0,
    };
    let mut data = SurvivalData::with_capacity(records.len(), p);
    let mut row = Vec::with_capacity(p);
    for r in records {
        row.clear();
        if covariates == Covariates::Full {
            row.extend_from_slice(&r.x);
            if with_arm {
                row.push(r.a as f64);
            }
        }
        let event = match kind {
            EventKind::Failure => r.is_event(),
            EventKind::Censoring => !r.is_event(),
        };
        data.push(r.y, event, &row);
    }
    data
}

/// Cox model for the censoring distribution within one source stratum.
///
/// Returns [`Error::NoCensoring`] when nobody in the stratum is censored.
pub fn fit_censoring(records: &[&SubjectRecord], covariates: Covariates, with_arm: bool) -> Result<CoxModel> {
    if records.iter().all(|r| r.is_event()) {
        return Err(Error::NoCensoring);
    }
    fit_cox(&survival_data(records, covariates, with_arm, EventKind::Censoring))
}

/// A covariate vector as a given fitted model expects it.
#[derive(Debug, Clone, Copy)]
pub struct Features<'a> {
    pub x: &'a [f64],
    pub a: u8,
}

/// Conditional survival or censoring model restricted to a covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    pub model: CoxModel,
    pub covariates: Covariates,
    pub with_arm: bool,
}

impl FittedCurve {
    pub fn new(model: CoxModel, covariates: Covariates, with_arm: bool) -> Self {
        FittedCurve { model, covariates, with_arm }
    }

    /// `S ≡ 1`.
    pub fn constant() -> Self {
        FittedCurve { model: CoxModel::constant(0), covariates: Covariates::InterceptOnly, with_arm: false }
    }

    pub fn relative_risk(&self, f: Features<'_>) -> f64 {
        match self.covariates {
            Covariates::InterceptOnly => 1.0,
            Covariates::Full => {
                let c = &self.model.coefficients;
                let p = f.x.len();
                let mut eta: f64 = c[..p].iter().zip(f.x).map(|(b, v)| b * v).sum();
                if self.with_arm {
                    eta += c[p] * f.a as f64;
                }
                eta.exp()
            }
        }
    }

    pub fn survival(&self, f: Features<'_>, t: f64) -> f64 {
        (-self.model.baseline_cumhaz(t) * self.relative_risk(f)).exp()
    }
}

/// Propensity-type model over baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub model: LogisticModel,
    pub covariates: Covariates,
}

impl FittedPropensity {
    pub fn constant(p: f64) -> Self {
        let intercept = if p <= 0.0 {
            f64::NEG_INFINITY
        } else if p >= 1.0 {
            f64::INFINITY
        } else {
            logit(p)
        };
        FittedPropensity { model: LogisticModel::from_parts(intercept, Vec::new()), covariates: Covariates::InterceptOnly }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.covariates {
            Covariates::Full => self.model.predict(x),
            Covariates::InterceptOnly => expit(self.model.intercept),
        }
    }
}

fn fit_propensity(records: &[&SubjectRecord], labels: &[u8], covariates: Covariates) -> Result<FittedPropensity> {
    let (features, p) = match covariates {
        Covariates::Full => {
            let p = records.first().map_or(0, |r| r.x.len());
            (records.iter().flat_map(|r| r.x.iter().copied()).collect::<Vec<_>>(), p)
        }
        Covariates::InterceptOnly => (Vec::new(), 0),
    };
    let model = fit_logistic(&features, p, labels, None)?;
    Ok(FittedPropensity { model, covariates })
}

/// Every nuisance function needed to evaluate the influence functions on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    /// `S_1(t|X, R=1)`.
    pub surv_treated: FittedCurve,
    /// `S_0(t|X, R=1)`.
    pub surv_control: FittedCurve,
    /// `S_0(t|X, R=0)`; absent for trial-only fits.
    pub surv_external: Option<FittedCurve>,
    /// `S^C(t|X, A, R=1)`.
    pub cens_trial: FittedCurve,
    /// `S^C(t|X, R=0)`.
    pub cens_external: Option<FittedCurve>,
    /// `P(R=1|X)`; absent for trial-only fits.
    pub pi_r: Option<FittedPropensity>,
    /// `P(A=1|X, R=1)`.
    pub pi_a: FittedPropensity,
    /// `P(R=1)`.
    pub p_r1: f64,
}

impl NuisanceSet {
    pub fn has_external(&self) -> bool {
        self.surv_external.is_some() && self.cens_external.is_some() && self.pi_r.is_some()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

fn curve(records: &[&SubjectRecord], covariates: Covariates, which: &'static str) -> Result<FittedCurve> {
    let model = fit_cox(&survival_data(records, covariates, false, EventKind::Failure))
        .map_err(|e| Error::nuisance(which, e))?;
    if !model.converged {
        return Err(Error::nuisance(which, Error::Domain("Newton iteration did not converge".into())));
    }
    Ok(FittedCurve::new(model, covariates, false))
}

fn censoring_curve(records: &[&SubjectRecord], covariates: Covariates, with_arm: bool, which: &'static str) -> Result<FittedCurve> {
    match fit_censoring(records, covariates, with_arm) {
        Ok(model) if model.converged => Ok(FittedCurve::new(model, covariates, with_arm)),
        Ok(_) => Err(Error::nuisance(which, Error::Domain("Newton iteration did not converge".into()))),
        Err(Error::NoCensoring) => Ok(FittedCurve::constant()),
        Err(e) => Err(Error::nuisance(which, e)),
    }
}

/// Fits one [`NuisanceSet`] on `records`; `p_r1` is supplied by the caller.
///
/// External-source components are fitted only when the records contain
/// external controls.
pub fn fit_nuisance_set(records: &[&SubjectRecord], p_r1: f64, options: &NuisanceOptions) -> Result<NuisanceSet> {
    let treated: Vec<&SubjectRecord> = records.iter().copied().filter(|r| r.is_trial() && r.a == 1).collect();
    let control: Vec<&SubjectRecord> = records.iter().copied().filter(|r| r.is_trial() && r.a == 0).collect();
    let trial: Vec<&SubjectRecord> = records.iter().copied().filter(|r| r.is_trial()).collect();
    let external: Vec<&SubjectRecord> = records.iter().copied().filter(|r| !r.is_trial()).collect();
    if treated.is_empty() {
        return Err(Error::nuisance("S1(t|X,R=1)", Error::Fold("fitting fold has no treated trial subjects".into())));
    }
    if control.is_empty() {
        return Err(Error::nuisance("S0(t|X,R=1)", Error::Fold("fitting fold has no trial controls".into())));
    }

    let surv_treated = curve(&treated, options.outcome, "S1(t|X,R=1)")?;
    let surv_control = curve(&control, options.outcome, "S0(t|X,R=1)")?;
    let cens_trial = censoring_curve(&trial, options.censoring, true, "S^C(t|X,A,R=1)")?;
    let a_labels: Vec<u8> = trial.iter().map(|r| r.a).collect();
    let pi_a = fit_propensity(&trial, &a_labels, options.propensity).map_err(|e| Error::nuisance("pi_A(X)", e))?;

    let (surv_external, cens_external, pi_r) = if external.is_empty() {
        (None, None, None)
    } else {
        let s = curve(&external, options.outcome, "S0(t|X,R=0)")?;
        let c = censoring_curve(&external, options.censoring, false, "S^C(t|X,R=0)")?;
        let r_labels: Vec<u8> = records.iter().map(|r| r.r).collect();
        let pr = fit_propensity(records, &r_labels, options.propensity).map_err(|e| Error::nuisance("pi_R(X)", e))?;
        (Some(s), Some(c), Some(pr))
    };

    Ok(NuisanceSet { surv_treated, surv_control, surv_external, cens_trial, cens_external, pi_r, pi_a, p_r1 })
}

/// Cross-fitted nuisances: entry `k` is fitted on every fold except `k`.
pub fn fit_nuisances(dataset: &Dataset, fold_of: &[usize], n_folds: usize, options: &NuisanceOptions) -> Result<Vec<NuisanceSet>> {
    if fold_of.len() != dataset.len() {
        return Err(Error::Contract("fold assignment must cover every record".into()));
    }
    let p_r1 = dataset.n_trial() as f64 / dataset.len() as f64;
    (0..n_folds)
        .map(|k| {
            let train: Vec<&SubjectRecord> = if n_folds == 1 {
                dataset.records.iter().collect()
            } else {
                dataset.records.iter().zip(fold_of).filter(|(_, &f)| f != k).map(|(r, _)| r).collect()
            };
            fit_nuisance_set(&train, p_r1, options)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, y: f64, delta: u8, a: u8, r: u8, x: f64) -> SubjectRecord {
        SubjectRecord { id, y, delta, a, r, x: vec![x] }
    }

    fn small() -> Dataset {
        let mut v = Vec::new();
        let mut id = 0;
        for r in [1u8, 0] {
            for a in [0u8, 1] {
                if r == 0 && a == 1 {
                    continue;
                }
                for k in 0..12 {
                    id += 1;
                    let x = (k as f64 - 5.5) / 4.0 + 0.1 * a as f64;
                    let y = 0.2 + ((k * 7 + id as usize) % 11) as f64 / 5.0;
                    let delta = u8::from(k % 3 != 0);
                    v.push(rec(id, y, delta, a, r, x));
                }
            }
        }
        // 24 trial / 12 external.
        Dataset::new(v, Dataset::default_names(1)).unwrap()
    }

    #[test]
    fn p_r1_is_count_ratio() {
        let mut recs = Vec::new();
        for i in 0..500u64 {
            let r = u8::from(i < 200);
            recs.push(rec(i, 1.0, 1, u8::from(r == 1 && i % 2 == 0), r, 0.0));
        }
        let d = Dataset::new(recs, Dataset::default_names(1)).unwrap();
        let p = d.n_trial() as f64 / d.len() as f64;
        assert!((p - 0.4).abs() < 1e-15);
    }

    #[test]
    fn fits_all_components() {
        let d = small();
        let sets = fit_nuisances(&d, &vec![0; d.len()], 1, &NuisanceOptions::default()).unwrap();
        let s = &sets[0];
        assert!(s.has_external());
        assert!((s.p_r1 - 24.0 / 36.0).abs() < 1e-15);
        assert_eq!(s.cens_trial.model.p(), 2);
        assert_eq!(s.cens_external.as_ref().unwrap().model.p(), 1);
    }

    #[test]
    fn missing_treated_is_annotated() {
        let d = small();
        let recs: Vec<&SubjectRecord> = d.records.iter().filter(|r| r.a == 0).collect();
        let err = fit_nuisance_set(&recs, 0.5, &NuisanceOptions::default()).unwrap_err();
        assert!(err.to_string().contains("S1"), "{err}");
    }

    #[test]
    fn censoring_without_censored_subjects() {
        let recs = [rec(1, 1.0, 1, 0, 1, 0.0), rec(2, 2.0, 1, 1, 1, 1.0)];
        let refs: Vec<&SubjectRecord> = recs.iter().collect();
        assert!(matches!(fit_censoring(&refs, Covariates::Full, true), Err(Error::NoCensoring)));
    }

    #[test]
    fn constant_propensity_edges() {
        assert_eq!(FittedPropensity::constant(0.0).predict(&[1.0]), 0.0);
        assert_eq!(FittedPropensity::constant(1.0).predict(&[1.0]), 1.0);
        assert!((FittedPropensity::constant(0.25).predict(&[]) - 0.25).abs() < 1e-15);
    }
}
