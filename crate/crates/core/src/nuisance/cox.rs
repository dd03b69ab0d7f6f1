//! Cox proportional hazards regression with Breslow ties and the Breslow
//! baseline cumulative hazard.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 10;
const GRAD_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-9;
const DIVERGENCE_BOUND: f64 = 50.0;

/// Fitted proportional hazards model `S(t|x) = exp(-Λ₀(t) exp(βᵀx))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub coefficients: Vec<f64>,
    /// Baseline step times, strictly increasing.
    step_times: Vec<f64>,
    /// Baseline hazard increment at each step time.
    increments: Vec<f64>,
    /// Cumulative baseline hazard at each step time.
    cumulative: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl CoxModel {
    /// Builds a model from known coefficients and `(time, increment)` baseline steps.
    pub fn from_parts(coefficients: Vec<f64>, steps: Vec<(f64, f64)>) -> Result<Self> {
        let mut prev = f64::NEG_INFINITY;
        for &(t, h) in &steps {
            if !(t > prev) || !t.is_finite() {
                return Err(Error::Contract("baseline step times must be strictly increasing".into()));
            }
            if !(h >= 0.0) || !h.is_finite() {
                return Err(Error::Contract(format!("baseline increment must be nonnegative, got {h}")));
            }
            prev = t;
        }
        let (step_times, increments): (Vec<_>, Vec<_>) = steps.into_iter().unzip();
        let cumulative = cumulate(&increments);
        Ok(CoxModel { coefficients, step_times, increments, cumulative, converged: true, iterations: 0 })
    }

    /// Model with no steps: `S ≡ 1`.
    pub fn constant(p: usize) -> Self {
        CoxModel {
            coefficients: vec![0.0; p],
            step_times: Vec::new(),
            increments: Vec::new(),
            cumulative: Vec::new(),
            converged: true,
            iterations: 0,
        }
    }

    pub fn p(&self) -> usize {
        self.coefficients.len()
    }

    pub fn step_times(&self) -> &[f64] {
        &self.step_times
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `(time, increment)` pairs of the baseline.
    pub fn baseline_steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.step_times.iter().copied().zip(self.increments.iter().copied())
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.coefficients.len());
        self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    pub fn relative_risk(&self, x: &[f64]) -> f64 {
        self.linear_predictor(x).exp()
    }

    /// Λ₀(t): sum of increments at step times `<= t`.
    pub fn baseline_cumhaz(&self, t: f64) -> f64 {
        let k = self.step_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Λ₀ just before `t`.
    pub fn baseline_cumhaz_before(&self, t: f64) -> f64 {
        let k = self.step_times.partition_point(|&s| s < t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Predicted survival `exp(-Λ₀(t)·exp(βᵀx))`, right-continuous in `t`.
    pub fn predict_survival(&self, x: &[f64], t: f64) -> f64 {
        (-self.baseline_cumhaz(t) * self.relative_risk(x)).exp()
    }

    /// Discrete hazard `1 - S(t|x)/S(t-|x)` of the fitted curve at `t`.
    pub fn discrete_hazard(&self, x: &[f64], t: f64) -> f64 {
        let jump = self.baseline_cumhaz(t) - self.baseline_cumhaz_before(t);
        if jump == 0.0 {
            0.0
        } else {
            -(-jump * self.relative_risk(x)).exp_m1()
        }
    }

    pub(crate) fn rebuild_cumulative(&mut self) {
        self.cumulative = cumulate(&self.increments);
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

fn cumulate(increments: &[f64]) -> Vec<f64> {
    increments
        .iter()
        .scan(0.0, |acc, &h| {
            *acc += h;
            Some(*acc)
        })
        .collect()
}

/// Fitting data: one row per subject.
#[derive(Debug, Clone, Default)]
pub struct SurvivalData {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    /// Row-major covariates, `p` per subject.
    pub x: Vec<f64>,
    pub p: usize,
}

impl SurvivalData {
    pub fn with_capacity(n: usize, p: usize) -> Self {
        SurvivalData { time: Vec::with_capacity(n), event: Vec::with_capacity(n), x: Vec::with_capacity(n * p), p }
    }

    pub fn push(&mut self, time: f64, event: bool, x: &[f64]) {
        debug_assert_eq!(x.len(), self.p);
        self.time.push(time);
        self.event.push(event);
        self.x.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// Sorted view used by the likelihood: subjects grouped by distinct time, descending.
struct RiskSetOrder {
    order: Vec<usize>,
    /// `(start, end)` ranges into `order` for each distinct time, descending in time.
    groups: Vec<(usize, usize)>,
}

impl RiskSetOrder {
    fn new(data: &SurvivalData) -> Self {
        let mut order: Vec<usize> = (0..data.len()).collect();
        // Descending time; stable on index so ties keep input order.
        order.sort_by(|&a, &b| data.time[b].total_cmp(&data.time[a]));
        let mut groups = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let t = data.time[order[start]];
            let mut end = start + 1;
            while end < order.len() && data.time[order[end]] == t {
                end += 1;
            }
            groups.push((start, end));
            start = end;
        }
        RiskSetOrder { order, groups }
    }
}

/// Log partial likelihood, score and Hessian at `beta` (Breslow ties).
pub fn partial_likelihood(data: &SurvivalData, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let order = RiskSetOrder::new(data);
    partial_likelihood_sorted(data, &order, beta)
}

fn partial_likelihood_sorted(data: &SurvivalData, rs: &RiskSetOrder, beta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let p = data.p;
    let eta: Vec<f64> = (0..data.len()).map(|i| dot(beta, data.row(i))).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut loglik = 0.0;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];

    for &(start, end) in &rs.groups {
        for &i in &rs.order[start..end] {
            let w = (eta[i] - shift).exp();
            let xi = data.row(i);
            s0 += w;
            for a in 0..p {
                s1[a] += w * xi[a];
                for b in 0..p {
                    s2[a * p + b] += w * xi[a] * xi[b];
                }
            }
        }
        let mut d = 0.0;
        for &i in &rs.order[start..end] {
            if data.event[i] {
                d += 1.0;
                loglik += eta[i] - shift;
                for (g, v) in grad.iter_mut().zip(data.row(i)) {
                    *g += v;
                }
            }
        }
        if d > 0.0 {
            loglik -= d * s0.ln();
            for a in 0..p {
                let ma = s1[a] / s0;
                grad[a] -= d * ma;
                for b in 0..p {
                    let mb = s1[b] / s0;
                    hess[a * p + b] -= d * (s2[a * p + b] / s0 - ma * mb);
                }
            }
        }
    }
    (loglik, grad, hess)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `(-H) δ = g` by Cholesky; fails when `-H` is not positive definite.
pub(crate) fn newton_direction(hess: &[f64], grad: &[f64]) -> Option<Vec<f64>> {
    let p = grad.len();
    let neg_h = DMatrix::from_fn(p, p, |i, j| -hess[i * p + j]);
    let chol = neg_h.cholesky()?;
    let delta = chol.solve(&DVector::from_column_slice(grad));
    if delta.iter().all(|v| v.is_finite()) {
        Some(delta.iter().copied().collect())
    } else {
        None
    }
}

/// Maximizes the Breslow partial likelihood by Newton iteration with
/// step-halving, then computes the Breslow baseline hazard.
pub fn fit_cox(data: &SurvivalData) -> Result<CoxModel> {
    let n = data.len();
    let p = data.p;
    if !data.event.iter().any(|&e| e) {
        return Err(Error::Domain("Cox fit requires at least one event".into()));
    }
    for j in 0..p {
        let first = data.x[j];
        if (0..n).all(|i| data.x[i * p + j] == first) {
            return Err(Error::Rank(format!("covariate {} is constant across the fitting set", j + 1)));
        }
    }

    let rs = RiskSetOrder::new(data);
    let mut beta = vec![0.0; p];
    let mut converged = p == 0;
    let mut iterations = 0;

    if p > 0 {
        let (mut loglik, mut grad, mut hess) = partial_likelihood_sorted(data, &rs, &beta);
        while iterations < MAX_ITER {
            let delta = newton_direction(&hess, &grad).ok_or_else(|| {
                if sup_norm(&beta) > 10.0 {
                    Error::Separation("partial-likelihood curvature vanished as |beta| grew".into())
                } else {
                    Error::Rank("partial-likelihood Hessian is singular".into())
                }
            })?;
            // A vanishing gradient alone is not enough: under monotone
            // likelihoods it decays while Newton steps stay O(1).
            if sup_norm(&grad) < GRAD_TOL && sup_norm(&delta) < STEP_TOL {
                converged = true;
                break;
            }
            iterations += 1;
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
                let eval = partial_likelihood_sorted(data, &rs, &cand);
                if eval.0.is_finite() && eval.0 >= loglik - 1e-12 * loglik.abs().max(1.0) {
                    accepted = Some((cand, eval));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, (l, g, h))) = accepted else {
                // No ascent along the Newton direction: at numerical optimum.
                converged = sup_norm(&grad) < 1e-6;
                break;
            };
            beta = cand;
            loglik = l;
            grad = g;
            hess = h;
            if sup_norm(&beta) > DIVERGENCE_BOUND {
                return Err(Error::Separation(format!(
                    "monotone partial likelihood: |beta| exceeded {DIVERGENCE_BOUND}"
                )));
            }
        }
    }

    let mut model = breslow_baseline(data, &rs, beta);
    model.converged = converged;
    model.iterations = iterations;
    Ok(model)
}

fn breslow_baseline(data: &SurvivalData, rs: &RiskSetOrder, beta: Vec<f64>) -> CoxModel {
    let risk: Vec<f64> = (0..data.len()).map(|i| dot(&beta, data.row(i)).exp()).collect();
    let mut s0 = 0.0;
    let mut steps = Vec::new();
    for &(start, end) in &rs.groups {
        let mut d = 0.0;
        for &i in &rs.order[start..end] {
            s0 += risk[i];
            if data.event[i] {
                d += 1.0;
            }
        }
        if d > 0.0 {
            steps.push((data.time[rs.order[start]], d / s0));
        }
    }
    steps.reverse();
    let (step_times, increments): (Vec<_>, Vec<_>) = steps.into_iter().unzip();
    let mut model = CoxModel {
        coefficients: beta,
        step_times,
        increments,
        cumulative: Vec::new(),
        converged: true,
        iterations: 0,
    };
    model.rebuild_cumulative();
    model
}
