use serde::{Deserialize, Serialize};

use super::cox::newton_direction;
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const STEP_TOL: f64 = 1e-9;
const DIVERGENCE_BOUND: f64 = 50.0;

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic regression `P(y=1|x) = expit(b0 + bᵀx)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub converged: bool,
}

impl LogisticModel {
    pub fn from_parts(intercept: f64, coefficients: Vec<f64>) -> Self {
        LogisticModel { intercept, coefficients, converged: true }
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }
}

/// Maximum-likelihood logistic fit by iteratively reweighted least squares.
///
/// `features` is row-major with `p` columns; an intercept is always added.
pub fn fit_logistic(features: &[f64], p: usize, labels: &[u8], weights: Option<&[f64]>) -> Result<LogisticModel> {
    let n = labels.len();
    if features.len() != n * p {
        return Err(Error::Contract(format!("feature matrix has {} values for {n} rows of {p}", features.len())));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Contract("weights must be finite, nonnegative and one per row".into()));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        match y {
            1 => pos += weight(i),
            0 => neg += weight(i),
            other => return Err(Error::Contract(format!("label must be 0 or 1, got {other}"))),
        }
    }
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Separation("logistic fit needs both labels present".into()));
    }

    for j in 0..p {
        let first = features.get(j).copied().unwrap_or(0.0);
        if (0..n).all(|i| features[i * p + j] == first) {
            return Err(Error::Rank(format!("feature {} is constant, aliased with the intercept", j + 1)));
        }
    }

    let k = p + 1;
    let row = |i: usize| &features[i * p..(i + 1) * p];
    let mut beta = vec![0.0; k];
    beta[0] = logit(pos / (pos + neg));
    let mut converged = false;

    for _ in 0..MAX_ITER {
        let mut score = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for i in 0..n {
            let xi = row(i);
            let eta = beta[0] + beta[1..].iter().zip(xi).map(|(b, v)| b * v).sum::<f64>();
            let mu = expit(eta);
            let w = weight(i);
            let resid = w * (labels[i] as f64 - mu);
            let curv = w * mu * (1.0 - mu);
            score[0] += resid;
            hess[0] -= curv;
            for a in 0..p {
                score[a + 1] += resid * xi[a];
                hess[a + 1] -= curv * xi[a];
                hess[(a + 1) * k] -= curv * xi[a];
                for b in 0..p {
                    hess[(a + 1) * k + b + 1] -= curv * xi[a] * xi[b];
                }
            }
        }
        let delta = newton_direction(&hess, &score).ok_or_else(|| {
            if beta.iter().any(|b| b.abs() > 10.0) {
                Error::Separation("fitted probabilities collapsed to 0/1".into())
            } else {
                Error::Rank("weighted design matrix is singular".into())
            }
        })?;
        for (b, d) in beta.iter_mut().zip(&delta) {
            *b += d;
        }
        // Under separation the score vanishes while Newton steps stay O(1),
        // so convergence is judged on both.
        let step = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if step < STEP_TOL && score.iter().all(|s| s.abs() < SCORE_TOL * (pos + neg).max(1.0)) {
            converged = true;
            break;
        }
        if beta.iter().any(|b| b.abs() > DIVERGENCE_BOUND || !b.is_finite()) {
            return Err(Error::Separation(format!("logistic coefficients exceeded {DIVERGENCE_BOUND}")));
        }
    }
    if !converged {
        return Err(Error::Separation("IRLS did not converge; data are likely separated".into()));
    }
    Ok(LogisticModel { intercept: beta[0], coefficients: beta[1..].to_vec(), converged })
}
