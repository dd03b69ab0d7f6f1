//! Influence-function evaluation for the trial-only, full-borrowing and
//! selective-borrowing estimators, integrated over the time grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{SubjectRecord, TimeGrid};
use crate::error::{Error, Result};
use crate::nuisance::{clamp_prob, Features, FittedCurve, NuisanceSet, PROB_CLAMP};

/// Bounds applied to the variance ratio `r(t, x)`.
pub const RATIO_BOUNDS: (f64, f64) = (1e-3, 1e3);

fn floor(v: f64) -> f64 {
    v.max(PROB_CLAMP)
}

/// Everything the pointwise influence functions need at one `(subject, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointValues {
    pub r: u8,
    pub a: u8,
    /// `1(Y > t) / S^C(t|X)` with the censoring survival clamped from below.
    pub ipw: f64,
    /// Censoring-martingale augmentation for the subject's own survival curve.
    pub martingale: f64,
    pub p1: f64,
    pub pi_a: f64,
    /// Density ratio `π_R / (1 − π_R)`.
    pub q: f64,
    pub s1: f64,
    pub s0: f64,
    /// Variance ratio `r(t, x)`.
    pub ratio: f64,
}

/// `r(t,x) = S₀(1−S₀) / {S₀ᵉ(1−S₀ᵉ)}` with both curves clamped to `[ε, 1−ε]`.
pub fn variance_ratio_r(s0_trial: f64, s0_external: f64) -> f64 {
    let a = clamp_prob(s0_trial);
    let b = clamp_prob(s0_external);
    (a * (1.0 - a) / (b * (1.0 - b))).clamp(RATIO_BOUNDS.0, RATIO_BOUNDS.1)
}

/// `D(t,x) = r + (1 − π_A) q`.
pub fn pooling_denominator_d(ratio: f64, pi_a: f64, q: f64) -> f64 {
    ratio + (1.0 - pi_a) * q
}

/// Density ratio from a (clamped) source propensity.
pub fn density_ratio(pi_r: f64) -> f64 {
    let p = clamp_prob(pi_r);
    p / (1.0 - p)
}

pub fn phi_s1(v: &PointValues) -> f64 {
    let (r, a) = (v.r as f64, v.a as f64);
    r * a * (v.ipw + v.martingale) / (v.p1 * v.pi_a) + r * v.s1 * (1.0 - a / v.pi_a) / v.p1
}

pub fn phi_s0_full(v: &PointValues) -> f64 {
    let (r, a) = (v.r as f64, v.a as f64);
    let d = pooling_denominator_d(v.ratio, v.pi_a, v.q);
    let aug = v.ipw + v.martingale;
    let trial = r * (1.0 - a) * v.q / (v.p1 * d) * aug;
    let external = (1.0 - r) * v.q * v.ratio / (v.p1 * d) * aug;
    let regression = v.s0 / v.p1 * (r * v.q * (a - v.pi_a) / d + v.ratio * (r - (1.0 - r) * v.q) / d);
    trial + external + regression
}

pub fn phi_s0_trial_only(v: &PointValues) -> f64 {
    let (r, a) = (v.r as f64, v.a as f64);
    let w = v.p1 * (1.0 - v.pi_a);
    r * (1.0 - a) * (v.ipw + v.martingale) / w + r * (a - v.pi_a) * v.s0 / w
}

/// Selective variant: `member` flags comparable externals and `p_b` is
/// `P(b = 0 | X, R = 0)` at the subject's covariates.
pub fn phi_s0_selective(v: &PointValues, member: bool, p_b: f64) -> f64 {
    let (r, a) = (v.r as f64, v.a as f64);
    let m = if member { 1.0 } else { 0.0 };
    let d = v.ratio * p_b + (1.0 - v.pi_a) * v.q;
    let aug = v.ipw + v.martingale;
    let trial = r * (1.0 - a) * v.q / (v.p1 * d) * aug;
    let external = (1.0 - r) * m * v.q * v.ratio / (v.p1 * d) * aug;
    let regression = v.s0 / v.p1 * (r * v.q * (a - v.pi_a) / d + v.ratio * (r * p_b - (1.0 - r) * m * v.q) / d);
    trial + external + regression
}

/// The two κ₀ branches for an external subject: `(κ₀(t|R=1), κ₀(t|R=0))`.
pub fn kappa_external(s0_trial: f64, s0_external: f64, ipw: f64, martingale: f64, pi_r: f64) -> (f64, f64) {
    let pr = clamp_prob(pi_r);
    (s0_trial, s0_external + (ipw + martingale - s0_external) / (1.0 - pr))
}

/// `∫₀^t dM^C(r)/S^C(r) · S(t)/S(r)` for one subject, evaluated directly.
///
/// The compensator uses the discrete hazard of the fitted censoring curve at
/// each of its step times, so that the tail integral telescopes exactly.
pub fn censoring_martingale_transform(
    subject: &SubjectRecord,
    t: f64,
    surv: impl Fn(f64) -> f64,
    cens: &FittedCurve,
    f: Features<'_>,
) -> f64 {
    let st = surv(t);
    let mut acc = 0.0;
    if subject.delta == 0 && subject.y <= t {
        acc += 1.0 / (floor(cens.survival(f, subject.y)) * floor(surv(subject.y)));
    }
    let rr = cens.relative_risk(f);
    let bound = t.min(subject.y);
    for (rj, inc) in cens.model.baseline_steps() {
        if rj > bound {
            break;
        }
        let h = -(-inc * rr).exp_m1();
        acc -= h / (floor(cens.survival(f, rj)) * floor(surv(rj)));
    }
    st * acc
}

/// `∫_t^∞ dM^C(r)/S^C(r)` by counting-process summation, without clamping.
pub fn martingale_tail(subject: &SubjectRecord, t: f64, cens: &FittedCurve, f: Features<'_>) -> f64 {
    let mut acc = 0.0;
    if subject.delta == 0 && subject.y > t {
        acc += 1.0 / cens.survival(f, subject.y);
    }
    let rr = cens.relative_risk(f);
    for (rj, inc) in cens.model.baseline_steps() {
        if rj > subject.y {
            break;
        }
        if rj > t {
            acc -= -(-inc * rr).exp_m1() / cens.survival(f, rj);
        }
    }
    acc
}

/// Closed form of [`martingale_tail`]: `1(Y > t){1/S^C(t) − Δ/S^C(Y)}`.
pub fn martingale_tail_closed_form(subject: &SubjectRecord, t: f64, cens: &FittedCurve, f: Features<'_>) -> f64 {
    if subject.y > t {
        1.0 / cens.survival(f, t) - subject.delta as f64 / cens.survival(f, subject.y)
    } else {
        0.0
    }
}

/// RMST-type integral of values given at the grid times.
///
/// The integrand equals 1 on `[0, t₁)` (survival at the origin) and
/// `values[k]` on `[t_k, t_{k+1})`; the value at `τ` itself is not used.
pub fn rmst_integrate(values: &[f64], grid: &TimeGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::Contract(format!("{} values supplied for a grid of {} times", values.len(), grid.len())));
    }
    let times = grid.times();
    let mut acc = times[0];
    for k in 1..times.len() {
        acc += values[k - 1] * (times[k] - times[k - 1]);
    }
    Ok(acc)
}

/// Per-subject integrated influence contributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRow {
    pub id: u64,
    pub phi1: f64,
    pub phi0_full: f64,
    pub phi0_rct: f64,
    pub phi0_sel: f64,
    pub psi: f64,
    /// `∫κ₀(t|R=1)` for externals (NaN otherwise).
    pub kappa_trial: f64,
    /// `∫κ₀(t|R=0)` for externals (NaN otherwise).
    pub kappa_external: f64,
}

impl InfluenceRow {
    /// Pseudo-outcome `ξ` of an external subject.
    pub fn xi(&self) -> f64 {
        self.kappa_trial - self.kappa_external
    }
}

/// Cumulative baseline hazard of `curve` at each left endpoint of the grid.
fn baseline_on(curve: &FittedCurve, left: &[f64]) -> Vec<f64> {
    left.iter().map(|&t| curve.model.baseline_cumhaz(t)).collect()
}

/// Evaluates `exp(−Λ₀(t_k)·rr)` along the grid, reusing the previous value
/// whenever the baseline has not moved.
struct CurveWalk<'a> {
    lam: &'a [f64],
    rr: f64,
    last_lam: f64,
    value: f64,
}

impl<'a> CurveWalk<'a> {
    fn new(lam: &'a [f64], rr: f64) -> Self {
        CurveWalk { lam, rr, last_lam: 0.0, value: 1.0 }
    }

    #[inline]
    fn at(&mut self, k: usize) -> f64 {
        let l = self.lam[k];
        if l != self.last_lam {
            self.last_lam = l;
            self.value = (-l * self.rr).exp();
        }
        self.value
    }
}

/// Grid values of one subject that determine its selective influence term,
/// so that it can be integrated for any membership and `P(b = 0 | X)`
/// without re-walking the fitted curves.
#[derive(Debug, Clone)]
pub struct SelectiveTrace {
    base: Option<PointValues>,
    /// `(ipw, martingale, s0, ratio)` at each left endpoint.
    points: Vec<[f64; 4]>,
}

impl SelectiveTrace {
    /// Same accumulation as the direct evaluation, hence bit-identical to it.
    pub fn phi0_selective(&self, widths: &[f64], member: bool, p_b: f64) -> f64 {
        let Some(base) = self.base else {
            return 0.0;
        };
        let mut acc = 0.0;
        for (&w, p) in widths.iter().zip(&self.points) {
            let v = PointValues { ipw: p[0], martingale: p[1], s0: p[2], ratio: p[3], ..base };
            acc += w * phi_s0_selective(&v, member, p_b);
        }
        acc
    }
}

/// Nuisances of one fold with their baselines tabulated on the grid.
pub struct EifContext<'a> {
    pub nuisances: &'a NuisanceSet,
    pub grid: &'a TimeGrid,
    left: Vec<f64>,
    widths: Vec<f64>,
    lam_s1: Vec<f64>,
    lam_s0: Vec<f64>,
    lam_s0e: Option<Vec<f64>>,
    lam_g1: Vec<f64>,
    lam_g0: Option<Vec<f64>>,
    /// Outcome baselines at the censoring-model step times, for the compensator:
    /// `S1` and `S0` at the trial steps, `S0e` at the external steps.
    steps_s1: Vec<f64>,
    steps_s0: Vec<f64>,
    steps_s0e: Option<Vec<f64>>,
}

/// Selection inputs for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectSelection {
    pub member: bool,
    pub p_b: f64,
}

impl<'a> EifContext<'a> {
    pub fn new(nuisances: &'a NuisanceSet, grid: &'a TimeGrid) -> Self {
        let left = grid.left_endpoints();
        let widths = grid.widths();
        EifContext {
            lam_s1: baseline_on(&nuisances.surv_treated, &left),
            lam_s0: baseline_on(&nuisances.surv_control, &left),
            lam_s0e: nuisances.surv_external.as_ref().map(|c| baseline_on(c, &left)),
            lam_g1: baseline_on(&nuisances.cens_trial, &left),
            lam_g0: nuisances.cens_external.as_ref().map(|c| baseline_on(c, &left)),
            steps_s1: baseline_on(&nuisances.surv_treated, nuisances.cens_trial.model.step_times()),
            steps_s0: baseline_on(&nuisances.surv_control, nuisances.cens_trial.model.step_times()),
            steps_s0e: match (&nuisances.surv_external, &nuisances.cens_external) {
                (Some(s), Some(c)) => Some(baseline_on(s, c.model.step_times())),
                _ => None,
            },
            nuisances,
            grid,
            left,
            widths,
        }
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn has_external(&self) -> bool {
        self.nuisances.has_external()
    }

    /// Integrated contributions of one subject.
    ///
    /// Full-borrowing and pseudo-outcome parts are NaN when the context has
    /// no external-source nuisances; `phi0_sel` is NaN without `selection`.
    pub fn evaluate(&self, subject: &SubjectRecord, selection: Option<SubjectSelection>) -> Result<InfluenceRow> {
        self.evaluate_impl(subject, selection, None)
    }

    /// Like [`evaluate`](Self::evaluate) without selection, additionally
    /// recording what the selective term needs once membership is known.
    pub fn evaluate_traced(&self, subject: &SubjectRecord) -> Result<(InfluenceRow, SelectiveTrace)> {
        let mut trace = SelectiveTrace { base: None, points: Vec::with_capacity(self.left.len()) };
        let row = self.evaluate_impl(subject, None, Some(&mut trace))?;
        Ok((row, trace))
    }

    fn evaluate_impl(
        &self,
        subject: &SubjectRecord,
        selection: Option<SubjectSelection>,
        mut trace: Option<&mut SelectiveTrace>,
    ) -> Result<InfluenceRow> {
        let ns = self.nuisances;
        let trial = subject.is_trial();
        if !trial && !self.has_external() {
            return Err(Error::Contract("external subject evaluated without external nuisances".into()));
        }
        let f = Features { x: &subject.x, a: subject.a };
        let pi_a = clamp_prob(ns.pi_a.predict(&subject.x));
        let (q, pi_r) = match &ns.pi_r {
            Some(m) => {
                let p = m.predict(&subject.x);
                (density_ratio(p), p)
            }
            None => (f64::NAN, f64::NAN),
        };

        let mut s1w = CurveWalk::new(&self.lam_s1, ns.surv_treated.relative_risk(f));
        let mut s0w = CurveWalk::new(&self.lam_s0, ns.surv_control.relative_risk(f));
        let s0e_curve = ns.surv_external.as_ref();
        let mut s0ew = match (&self.lam_s0e, s0e_curve) {
            (Some(l), Some(c)) => Some(CurveWalk::new(l, c.relative_risk(f))),
            _ => None,
        };
        let (cens, lam_g) = if trial {
            (&ns.cens_trial, self.lam_g1.as_slice())
        } else {
            (ns.cens_external.as_ref().expect("checked above"), self.lam_g0.as_deref().expect("checked above"))
        };
        let mut gw = CurveWalk::new(lam_g, cens.relative_risk(f));
        // The subject's own outcome curve, used inside its censoring martingale.
        let own: &FittedCurve = if !trial {
            s0e_curve.expect("checked above")
        } else if subject.a == 1 {
            &ns.surv_treated
        } else {
            &ns.surv_control
        };
        let own_steps: &[f64] = if !trial {
            self.steps_s0e.as_deref().expect("checked above")
        } else if subject.a == 1 {
            &self.steps_s1
        } else {
            &self.steps_s0
        };
        let mut own_at_step = CurveWalk::new(own_steps, own.relative_risk(f));
        let cens_rr = cens.relative_risk(f);
        let steps_t = cens.model.step_times();
        let steps_h = cens.model.increments();
        let mut next_step = 0;
        let mut comp = 0.0;
        // Censoring survival just after the latest step passed.
        let mut g_run = 1.0;
        let jump = if subject.delta == 0 {
            1.0 / (floor(cens.survival(f, subject.y)) * floor(own.survival(f, subject.y)))
        } else {
            0.0
        };

        let (mut i1, mut ifull, mut irct, mut isel, mut ik1, mut ike) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, (&t, &w)) in self.left.iter().zip(&self.widths).enumerate() {
            let s1 = s1w.at(k);
            let s0 = s0w.at(k);
            let s0e = s0ew.as_mut().map_or(f64::NAN, |c| c.at(k));
            let alive = subject.y > t;
            let ipw = if alive { 1.0 / floor(gw.at(k)) } else { 0.0 };

            let bound = t.min(subject.y);
            while next_step < steps_t.len() && steps_t[next_step] <= bound {
                let h = -(-steps_h[next_step] * cens_rr).exp_m1();
                g_run *= 1.0 - h;
                let s = own_at_step.at(next_step);
                comp += h / (floor(g_run) * floor(s));
                next_step += 1;
            }
            let s_own = if !trial {
                s0e
            } else if subject.a == 1 {
                s1
            } else {
                s0
            };
            let jumped = if subject.y <= t { jump } else { 0.0 };
            let martingale = s_own * (jumped - comp);

            let v = PointValues {
                r: subject.r,
                a: subject.a,
                ipw,
                martingale,
                p1: ns.p_r1,
                pi_a,
                q,
                s1,
                s0,
                ratio: if s0ew.is_some() { variance_ratio_r(s0, s0e) } else { f64::NAN },
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.base.get_or_insert(v);
                tr.points.push([v.ipw, v.martingale, v.s0, v.ratio]);
            }
            i1 += w * phi_s1(&v);
            irct += w * phi_s0_trial_only(&v);
            if s0ew.is_some() {
                ifull += w * phi_s0_full(&v);
                if let Some(sel) = selection {
                    isel += w * phi_s0_selective(&v, sel.member, sel.p_b);
                }
                if !trial {
                    let (k1, ke) = kappa_external(s0, s0e, ipw, martingale, pi_r);
                    ik1 += w * k1;
                    ike += w * ke;
                }
            }
        }
        let has_ext = s0ew.is_some();
        let phi0_full = if has_ext { ifull } else { f64::NAN };
        Ok(InfluenceRow {
            id: subject.id,
            phi1: i1,
            phi0_full,
            phi0_rct: irct,
            phi0_sel: if has_ext && selection.is_some() { isel } else { f64::NAN },
            psi: i1 - phi0_full,
            kappa_trial: if has_ext && !trial { ik1 } else { f64::NAN },
            kappa_external: if has_ext && !trial { ike } else { f64::NAN },
        })
    }

    /// Influence values of one subject at every left endpoint, for diagnostics:
    /// `(t, φ₁, φ₀ full, φ₀ trial-only)`.
    pub fn pointwise(&self, subject: &SubjectRecord) -> Vec<(f64, f64, f64, f64)> {
        let ns = self.nuisances;
        let f = Features { x: &subject.x, a: subject.a };
        let trial = subject.is_trial();
        let cens = if trial { &ns.cens_trial } else { ns.cens_external.as_ref().expect("external nuisances") };
        let own: &FittedCurve = if !trial {
            ns.surv_external.as_ref().expect("external nuisances")
        } else if subject.a == 1 {
            &ns.surv_treated
        } else {
            &ns.surv_control
        };
        let pi_a = clamp_prob(ns.pi_a.predict(&subject.x));
        let q = ns.pi_r.as_ref().map_or(f64::NAN, |m| density_ratio(m.predict(&subject.x)));
        self.left
            .iter()
            .map(|&t| {
                let s0 = ns.surv_control.survival(f, t);
                let s0e = ns.surv_external.as_ref().map_or(f64::NAN, |c| c.survival(f, t));
                let v = PointValues {
                    r: subject.r,
                    a: subject.a,
                    ipw: if subject.y > t { 1.0 / floor(cens.survival(f, t)) } else { 0.0 },
                    martingale: censoring_martingale_transform(subject, t, |s| own.survival(f, s), cens, f),
                    p1: ns.p_r1,
                    pi_a,
                    q,
                    s1: ns.surv_treated.survival(f, t),
                    s0,
                    ratio: variance_ratio_r(s0, s0e),
                };
                (t, phi_s1(&v), phi_s0_full(&v), phi_s0_trial_only(&v))
            })
            .collect()
    }
}

/// Writes `id,phi1,phi0_full,phi0_rct,phi0_sel,psi`.
pub fn write_influence_csv<W: Write>(rows: &[InfluenceRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["id", "phi1", "phi0_full", "phi0_rct", "phi0_sel", "psi"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.id.to_string(),
            r.phi1.to_string(),
            r.phi0_full.to_string(),
            r.phi0_rct.to_string(),
            r.phi0_sel.to_string(),
            r.psi.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
