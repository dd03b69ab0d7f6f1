//! Bias detection for external controls: pseudo-outcomes, penalized
//! thresholding, BIC tuning and the comparable set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::SubjectRecord;
use crate::eif::{csv_err, EifContext};
use crate::error::{Error, Result};
use crate::nuisance::{fit_logistic, FittedPropensity};

/// Floor on `|ξ|` inside the adaptive weights.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Consistency constant turning a MAD into a normal-scale SD.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcome {
    pub id: u64,
    pub x: Vec<f64>,
    pub xi: f64,
    /// `∫κ₀(t|R=1) dt`.
    pub kappa_trial: f64,
    /// `∫κ₀(t|R=0) dt`.
    pub kappa_external: f64,
}

/// Pseudo-outcome of an external subject under a fold's nuisances.
pub fn pseudo_outcome(subject: &SubjectRecord, ctx: &EifContext<'_>) -> Result<PseudoOutcome> {
    if subject.is_trial() {
        return Err(Error::Contract(format!("subject {} is a trial record; pseudo-outcomes are for externals", subject.id)));
    }
    let row = ctx.evaluate(subject, None)?;
    Ok(PseudoOutcome {
        id: subject.id,
        x: subject.x.clone(),
        xi: row.xi(),
        kappa_trial: row.kappa_trial,
        kappa_external: row.kappa_external,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    #[default]
    AdaptiveLasso,
    Scad,
    Mcp,
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive-lasso" | "lasso" => Ok(PenaltyKind::AdaptiveLasso),
            "scad" => Ok(PenaltyKind::Scad),
            "mcp" => Ok(PenaltyKind::Mcp),
            other => Err(Error::Config(format!("unknown penalty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub scad_a: f64,
    pub mcp_gamma: f64,
    /// Exponent of the adaptive-lasso weights.
    pub adaptive_gamma: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams { scad_a: 3.7, mcp_gamma: 3.0, adaptive_gamma: 1.0 }
    }
}

impl PenaltyParams {
    fn validate(&self, kind: PenaltyKind) -> Result<()> {
        match kind {
            PenaltyKind::Scad if !(self.scad_a > 2.0) => Err(Error::Domain(format!("SCAD a must exceed 2, got {}", self.scad_a))),
            PenaltyKind::Mcp if !(self.mcp_gamma > 1.0) => {
                Err(Error::Domain(format!("MCP gamma must exceed 1, got {}", self.mcp_gamma)))
            }
            _ => Ok(()),
        }
    }
}

/// Minimizer of `(ξ − b)² + λ·w·p(|b|)`.
///
/// Every penalty is scaled so that its slope at the origin is `λw/2` on the
/// half-quadratic scale, i.e. all three share the lasso's threshold.
pub fn threshold(xi: f64, lambda: f64, kind: PenaltyKind, weight: f64, params: &PenaltyParams) -> Result<f64> {
    params.validate(kind)?;
    if !(lambda >= 0.0) || !(weight > 0.0) {
        return Err(Error::Domain(format!("need lambda >= 0 and weight > 0, got {lambda}, {weight}")));
    }
    let kappa = 0.5 * lambda * weight;
    let z = xi.abs();
    let soft = (z - kappa).max(0.0);
    let mag = match kind {
        PenaltyKind::AdaptiveLasso => soft,
        PenaltyKind::Scad => {
            let a = params.scad_a;
            if z <= 2.0 * kappa {
                soft
            } else if z <= a * kappa {
                ((a - 1.0) * z - a * kappa) / (a - 2.0)
            } else {
                z
            }
        }
        PenaltyKind::Mcp => {
            let g = params.mcp_gamma;
            if z <= g * kappa {
                soft / (1.0 - 1.0 / g)
            } else {
                z
            }
        }
    };
    Ok(if mag == 0.0 { 0.0 } else { mag.copysign(xi) })
}

/// Penalty value `P_κ(|b|)` on the half-quadratic scale, matching [`threshold`].
pub fn penalty_value(b: f64, kappa: f64, kind: PenaltyKind, params: &PenaltyParams) -> f64 {
    let t = b.abs();
    match kind {
        PenaltyKind::AdaptiveLasso => kappa * t,
        PenaltyKind::Scad => {
            let a = params.scad_a;
            if t <= kappa {
                kappa * t
            } else if t <= a * kappa {
                (2.0 * a * kappa * t - t * t - kappa * kappa) / (2.0 * (a - 1.0))
            } else {
                kappa * kappa * (a + 1.0) / 2.0
            }
        }
        PenaltyKind::Mcp => {
            let g = params.mcp_gamma;
            if t <= g * kappa {
                kappa * t - t * t / (2.0 * g)
            } else {
                g * kappa * kappa / 2.0
            }
        }
    }
}

/// Per-subject penalty weight: adaptive for the lasso, unit otherwise.
pub fn penalty_weight(xi: f64, kind: PenaltyKind, params: &PenaltyParams) -> f64 {
    match kind {
        PenaltyKind::AdaptiveLasso => 1.0 / xi.abs().max(WEIGHT_FLOOR).powf(params.adaptive_gamma),
        PenaltyKind::Scad | PenaltyKind::Mcp => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ids: Vec<u64>,
    pub xi: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub lambda: f64,
    pub kind: PenaltyKind,
    /// `b̃ᵢ = 0`.
    pub selected: Vec<bool>,
    /// `P(b = 0 | X, R = 0)` fitted on every external.
    pub selection_model: FittedPropensity,
}

impl SelectionResult {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn comparable_ids(&self) -> Vec<u64> {
        self.ids.iter().zip(&self.selected).filter(|(_, &s)| s).map(|(&i, _)| i).collect()
    }

    /// Writes `id,xi,b_tilde,selected`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["id", "xi", "b_tilde", "selected"]).map_err(csv_err)?;
        for k in 0..self.ids.len() {
            w.write_record([
                self.ids[k].to_string(),
                self.xi[k].to_string(),
                self.b_tilde[k].to_string(),
                u8::from(self.selected[k]).to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn shrink_all(xi: &[f64], lambda: f64, kind: PenaltyKind, params: &PenaltyParams) -> Result<Vec<f64>> {
    xi.iter().map(|&x| threshold(x, lambda, kind, penalty_weight(x, kind, params), params)).collect()
}

/// Logistic model of membership on covariates, falling back to the constant
/// proportion when the memberships are all equal or separated.
pub fn fit_selection_model(xs: &[&[f64]], member: &[bool]) -> FittedPropensity {
    let n = member.len();
    let k = member.iter().filter(|&&m| m).count();
    if n == 0 {
        return FittedPropensity::constant(0.0);
    }
    let share = k as f64 / n as f64;
    if k == 0 || k == n {
        return FittedPropensity::constant(share);
    }
    let p = xs.first().map_or(0, |x| x.len());
    let features: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    let labels: Vec<u8> = member.iter().map(|&m| u8::from(m)).collect();
    match fit_logistic(&features, p, &labels, None) {
        Ok(model) => FittedPropensity { model, covariates: crate::nuisance::Covariates::Full },
        Err(e) => {
            log::debug!("selection model fell back to the constant proportion: {e}");
            FittedPropensity::constant(share)
        }
    }
}

/// Thresholds every pseudo-outcome at `lambda` and extracts the comparable set.
pub fn refine_biases(pseudo: &[PseudoOutcome], lambda: f64, kind: PenaltyKind, params: &PenaltyParams) -> Result<SelectionResult> {
    if pseudo.is_empty() {
        return Err(Error::Contract("refine_biases needs at least one pseudo-outcome".into()));
    }
    let xi: Vec<f64> = pseudo.iter().map(|p| p.xi).collect();
    let b_tilde = shrink_all(&xi, lambda, kind, params)?;
    let selected: Vec<bool> = b_tilde.iter().map(|&b| b == 0.0).collect();
    let xs: Vec<&[f64]> = pseudo.iter().map(|p| p.x.as_slice()).collect();
    let selection_model = fit_selection_model(&xs, &selected);
    Ok(SelectionResult { ids: pseudo.iter().map(|p| p.id).collect(), xi, b_tilde, lambda, kind, selected, selection_model })
}

/// Robust scale `1.4826 · median|ξ − median ξ|`.
pub fn mad_sigma(xi: &[f64]) -> f64 {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    if xi.is_empty() {
        return 0.0;
    }
    let mut v = xi.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = xi.iter().map(|x| (x - m).abs()).collect();
    MAD_SCALE * median(&mut dev)
}

/// 50 log-spaced values over `[1e-3, 10]·σ̂`.
pub fn default_lambda_grid(xi: &[f64]) -> Vec<f64> {
    let s = mad_sigma(xi);
    let scale = if s > 0.0 && s.is_finite() { s } else { 1.0 };
    let (lo, hi) = ((1e-3 * scale).ln(), (10.0 * scale).ln());
    (0..50).map(|k| (lo + (hi - lo) * k as f64 / 49.0).exp()).collect()
}

/// `BIC(λ) = Σ(ξ − b̃)² + σ̂² log(N_e) · #{b̃ ≠ 0}`.
pub fn bic(xi: &[f64], lambda: f64, kind: PenaltyKind, params: &PenaltyParams) -> Result<f64> {
    let s = mad_sigma(xi);
    let b = shrink_all(xi, lambda, kind, params)?;
    let rss: f64 = xi.iter().zip(&b).map(|(x, bb)| (x - bb) * (x - bb)).sum();
    let nonzero = b.iter().filter(|&&v| v != 0.0).count() as f64;
    Ok(rss + s * s * (xi.len() as f64).ln() * nonzero)
}

/// Grid value minimizing [`bic`], ties resolved toward the larger `λ`.
pub fn select_lambda(pseudo: &[PseudoOutcome], grid: &[f64], kind: PenaltyKind, params: &PenaltyParams) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Contract("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("lambda grid must be strictly ascending".into()));
    }
    let xi: Vec<f64> = pseudo.iter().map(|p| p.xi).collect();
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let v = bic(&xi, lambda, kind, params)?;
        if v <= best.0 + 1e-12 * best.0.abs().max(1e-300) {
            best = (v, lambda);
        }
    }
    Ok(best.1)
}
