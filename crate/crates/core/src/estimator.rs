//! Cross-fitted trial-only (AIPW), full-borrowing (ACW) and selective-borrowing
//! (adaptive) estimators of the RMST difference, with stratified bootstrap.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, SubjectRecord, TimeGrid};
use crate::eif::{EifContext, InfluenceRow, SelectiveTrace, SubjectSelection};
use crate::error::{Error, Result};
use crate::nuisance::{fit_nuisance_set, FittedPropensity, NuisanceOptions, NuisanceSet};
use crate::rng::{child_rng, derive_seed};
use crate::selector::{
    default_lambda_grid, fit_selection_model, refine_biases, select_lambda, PenaltyKind, PenaltyParams, PseudoOutcome,
    SelectionResult,
};

const FOLD_STREAM: u64 = 0xF01D;
const BOOT_STREAM: u64 = 0xB007;
/// Largest number of (external, grid point) values kept to avoid a second EIF pass.
const TRACE_BUDGET: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Aipw,
    Acw,
    Adapt,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Aipw, EstimatorKind::Acw, EstimatorKind::Adapt];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Aipw => "aipw",
            EstimatorKind::Acw => "acw",
            EstimatorKind::Adapt => "adapt",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aipw" => Ok(EstimatorKind::Aipw),
            "acw" => Ok(EstimatorKind::Acw),
            "adapt" => Ok(EstimatorKind::Adapt),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossFitMode {
    /// Every fold is evaluated with nuisances fitted on the others.
    #[default]
    Swap,
    /// Nuisances from fold 0, evaluation on fold 1 only.
    SingleSplit,
}

/// Forces the comparable set, bypassing the data-driven selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionOverride {
    #[default]
    Data,
    /// Every external selected, `P(b=0|X,R=0) ≡ 1`.
    All,
    /// No external selected, `P(b=0|X,R=0) ≡ 0`.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub folds: usize,
    pub mode: CrossFitMode,
    pub nuisance: NuisanceOptions,
    pub penalty: PenaltyKind,
    pub penalty_params: PenaltyParams,
    /// Fixed penalty level; `None` selects it by BIC.
    pub lambda: Option<f64>,
    pub selection: SelectionOverride,
    pub bootstrap: usize,
    pub level: f64,
    /// Re-select `λ` inside every bootstrap resample.
    pub refit_lambda: bool,
    pub max_resample_attempts: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            folds: 2,
            mode: CrossFitMode::Swap,
            nuisance: NuisanceOptions::default(),
            penalty: PenaltyKind::AdaptiveLasso,
            penalty_params: PenaltyParams::default(),
            lambda: None,
            selection: SelectionOverride::Data,
            bootstrap: 50,
            level: 0.95,
            refit_lambda: false,
            max_resample_attempts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Fold of each record, aligned with `Dataset::records`.
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub mode: CrossFitMode,
}

impl FoldPlan {
    /// Folds whose subjects are evaluated.
    pub fn evaluation_folds(&self) -> Vec<usize> {
        match self.mode {
            CrossFitMode::Swap => (0..self.k).collect(),
            CrossFitMode::SingleSplit => vec![1],
        }
    }

    /// Whether record `i` is used to fit the nuisances evaluated on `fold`.
    pub fn trains(&self, i: usize, fold: usize) -> bool {
        match self.mode {
            CrossFitMode::Swap => self.fold_of[i] != fold,
            CrossFitMode::SingleSplit => self.fold_of[i] == 0,
        }
    }
}

/// Fold assignment stratified by (R, A) cell.
///
/// Each cell is ordered by id and shuffled with its own stream, so a cell's
/// assignment does not depend on the other cells' contents.
pub fn make_folds(dataset: &Dataset, k: usize, mode: CrossFitMode, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Fold(format!("need at least 2 folds, got {k}")));
    }
    if mode == CrossFitMode::SingleSplit && k != 2 {
        return Err(Error::Fold("single-split mode uses exactly 2 folds".into()));
    }
    let mut fold_of = vec![0; dataset.len()];
    for cell in 0..3 {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records[i].cell() == cell).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(Error::Fold(format!(
                "design cell {cell} has {} records, fewer than {k} folds; use fewer folds or single-split mode",
                idx.len()
            )));
        }
        idx.sort_by_key(|&i| dataset.records[i].id);
        idx.shuffle(&mut child_rng(seed, cell as u64));
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    Ok(FoldPlan { fold_of, k, mode })
}

/// Point estimates from one cross-fitting pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub tau: f64,
    pub aipw: f64,
    pub acw: Option<f64>,
    pub adapt: Option<f64>,
    pub lambda: Option<f64>,
    pub selection: Option<SelectionResult>,
    /// Rows of the evaluated subjects; `phi0_sel` is filled when adapt ran.
    pub rows: Vec<InfluenceRow>,
    pub n_trial: usize,
    pub n_external: usize,
}

impl CrossFit {
    pub fn theta(&self, kind: EstimatorKind) -> Option<f64> {
        match kind {
            EstimatorKind::Aipw => Some(self.aipw),
            EstimatorKind::Acw => self.acw,
            EstimatorKind::Adapt => self.adapt,
        }
    }

    pub fn n_borrowed(&self, kind: EstimatorKind) -> usize {
        match kind {
            EstimatorKind::Aipw => 0,
            EstimatorKind::Acw => self.n_external,
            EstimatorKind::Adapt => self.selection.as_ref().map_or(0, |s| s.n_selected()),
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs cross-fitting once and returns every estimate the data support.
///
/// External-source estimators are skipped when the dataset has no externals.
pub fn cross_fit(dataset: &Dataset, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<CrossFit> {
    dataset.require_both_arms()?;
    let grid = TimeGrid::from_observed(dataset, tau)?;
    let plan = make_folds(dataset, options.folds, options.mode, derive_seed(seed, FOLD_STREAM))?;
    let eval_folds = plan.evaluation_folds();
    let in_eval = |i: usize| eval_folds.contains(&plan.fold_of[i]);
    let eval_idx: Vec<usize> = (0..dataset.len()).filter(|&i| in_eval(i)).collect();
    let n_eval = eval_idx.len();
    let n_eval_trial = eval_idx.iter().filter(|&&i| dataset.records[i].is_trial()).count();
    let p_r1 = n_eval_trial as f64 / n_eval as f64;
    let has_external = dataset.n_external() > 0;

    let nuisances: Vec<NuisanceSet> = eval_folds
        .iter()
        .map(|&k| {
            let train: Vec<&SubjectRecord> =
                (0..dataset.len()).filter(|&i| plan.trains(i, k)).map(|i| &dataset.records[i]).collect();
            fit_nuisance_set(&train, p_r1, &options.nuisance)
        })
        .collect::<Result<_>>()?;
    let contexts: Vec<EifContext<'_>> = nuisances.iter().map(|ns| EifContext::new(ns, &grid)).collect();
    let ctx_of = |i: usize| {
        let pos = eval_folds.iter().position(|&k| k == plan.fold_of[i]).expect("evaluation fold");
        &contexts[pos]
    };

    let n_external = dataset.n_external();
    let mut out = CrossFit {
        tau,
        aipw: f64::NAN,
        acw: None,
        adapt: None,
        lambda: None,
        selection: None,
        rows: Vec::new(),
        n_trial: dataset.n_trial(),
        n_external,
    };
    if !has_external {
        let rows: Vec<InfluenceRow> =
            eval_idx.par_iter().map(|&i| ctx_of(i).evaluate(&dataset.records[i], None)).collect::<Result<_>>()?;
        out.aipw = mean(rows.iter().map(|r| r.phi1 - r.phi0_rct));
        out.rows = rows;
        return Ok(out);
    }

    // Externals first: their pseudo-outcomes drive the selection. When memory
    // allows, each keeps a trace so its selective term needs no second walk.
    let ext_pos: Vec<usize> = (0..n_eval).filter(|&j| !dataset.records[eval_idx[j]].is_trial()).collect();
    let traced = ext_pos.len().saturating_mul(grid.len()) <= TRACE_BUDGET;
    let ext_eval: Vec<(InfluenceRow, Option<SelectiveTrace>)> = ext_pos
        .par_iter()
        .map(|&j| {
            let i = eval_idx[j];
            if traced {
                ctx_of(i).evaluate_traced(&dataset.records[i]).map(|(r, t)| (r, Some(t)))
            } else {
                ctx_of(i).evaluate(&dataset.records[i], None).map(|r| (r, None))
            }
        })
        .collect::<Result<_>>()?;

    let pseudo: Vec<PseudoOutcome> = ext_pos
        .iter()
        .zip(&ext_eval)
        .map(|(&j, (row, _))| {
            let rec = &dataset.records[eval_idx[j]];
            PseudoOutcome {
                id: rec.id,
                x: rec.x.clone(),
                xi: row.xi(),
                kappa_trial: row.kappa_trial,
                kappa_external: row.kappa_external,
            }
        })
        .collect();
    let lambda = match options.lambda {
        Some(l) => l,
        None => {
            let xi: Vec<f64> = pseudo.iter().map(|p| p.xi).collect();
            select_lambda(&pseudo, &default_lambda_grid(&xi), options.penalty, &options.penalty_params)?
        }
    };
    let mut selection = refine_biases(&pseudo, lambda, options.penalty, &options.penalty_params)?;
    match options.selection {
        SelectionOverride::Data => {}
        SelectionOverride::All => {
            selection.selected.iter_mut().for_each(|s| *s = true);
            selection.b_tilde.iter_mut().for_each(|b| *b = 0.0);
            selection.selection_model = FittedPropensity::constant(1.0);
        }
        SelectionOverride::None => {
            selection.selected.iter_mut().for_each(|s| *s = false);
            selection.selection_model = FittedPropensity::constant(0.0);
        }
    }

    // Membership per evaluated record and the selection-probability model per fold.
    let mut member = vec![false; n_eval];
    for (k, &j) in ext_pos.iter().enumerate() {
        member[j] = selection.selected[k];
    }
    let sel_models: Vec<FittedPropensity> = eval_folds
        .iter()
        .map(|&fold| match options.selection {
            SelectionOverride::All => FittedPropensity::constant(1.0),
            SelectionOverride::None => FittedPropensity::constant(0.0),
            SelectionOverride::Data => {
                let (xs, m): (Vec<&[f64]>, Vec<bool>) = ext_pos
                    .iter()
                    .filter(|&&j| {
                        let f = plan.fold_of[eval_idx[j]];
                        match plan.mode {
                            CrossFitMode::Swap => f != fold,
                            CrossFitMode::SingleSplit => true,
                        }
                    })
                    .map(|&j| (dataset.records[eval_idx[j]].x.as_slice(), member[j]))
                    .unzip();
                fit_selection_model(&xs, &m)
            }
        })
        .collect();
    let selection_of = |j: usize| {
        let i = eval_idx[j];
        let pos = eval_folds.iter().position(|&k| k == plan.fold_of[i]).expect("evaluation fold");
        (pos, SubjectSelection { member: member[j], p_b: sel_models[pos].predict(&dataset.records[i].x) })
    };

    let mut slots: Vec<Option<InfluenceRow>> = vec![None; n_eval];
    let ext_rows: Vec<InfluenceRow> = ext_pos
        .par_iter()
        .zip(ext_eval)
        .map(|(&j, (mut row, trace))| {
            let (pos, sel) = selection_of(j);
            row.phi0_sel = match trace {
                Some(t) => t.phi0_selective(contexts[pos].widths(), sel.member, sel.p_b),
                None => contexts[pos].evaluate(&dataset.records[eval_idx[j]], Some(sel))?.phi0_sel,
            };
            Ok(row)
        })
        .collect::<Result<_>>()?;
    for (&j, row) in ext_pos.iter().zip(ext_rows) {
        slots[j] = Some(row);
    }
    let trial_pos: Vec<usize> = (0..n_eval).filter(|&j| dataset.records[eval_idx[j]].is_trial()).collect();
    let trial_rows: Vec<InfluenceRow> = trial_pos
        .par_iter()
        .map(|&j| {
            let (pos, sel) = selection_of(j);
            contexts[pos].evaluate(&dataset.records[eval_idx[j]], Some(sel))
        })
        .collect::<Result<_>>()?;
    for (&j, row) in trial_pos.iter().zip(trial_rows) {
        slots[j] = Some(row);
    }
    let rows: Vec<InfluenceRow> = slots.into_iter().map(|r| r.expect("every evaluated record filled")).collect();

    out.aipw = mean(rows.iter().map(|r| r.phi1 - r.phi0_rct));
    out.acw = Some(mean(rows.iter().map(|r| r.phi1 - r.phi0_full)));
    out.adapt = Some(mean(rows.iter().map(|r| r.phi1 - r.phi0_sel)));
    out.lambda = Some(lambda);
    out.selection = Some(selection);
    out.rows = rows;
    Ok(out)
}

/// Resample within each (R, A) cell with replacement; ids are reassigned 1..N.
pub fn stratified_resample(dataset: &Dataset, seed: u64) -> Dataset {
    let mut records = Vec::with_capacity(dataset.len());
    for cell in 0..3 {
        let mut idx: Vec<&SubjectRecord> = dataset.records.iter().filter(|r| r.cell() == cell).collect();
        if idx.is_empty() {
            continue;
        }
        idx.sort_by_key(|r| r.id);
        let mut rng = child_rng(seed, cell as u64);
        for _ in 0..idx.len() {
            records.push(idx[rng.random_range(0..idx.len())].clone());
        }
    }
    for (k, r) in records.iter_mut().enumerate() {
        r.id = k as u64 + 1;
    }
    Dataset { records, covariate_names: dataset.covariate_names.clone() }
}

/// Applies `f` to `b` stratified resamples, retrying a failing resample with
/// fresh draws up to `max_attempts` times.
pub fn bootstrap_with<T, F>(dataset: &Dataset, b: usize, seed: u64, max_attempts: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Dataset, u64) -> Result<T> + Sync,
{
    (0..b as u64)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, rep);
            let mut last = String::new();
            for attempt in 0..max_attempts.max(1) as u64 {
                let s = derive_seed(rep_seed, attempt);
                let resample = stratified_resample(dataset, s);
                match f(&resample, s) {
                    Ok(v) => return Ok(v),
                    Err(e) => {
                        log::debug!("bootstrap resample {rep} attempt {attempt} failed: {e}");
                        last = e.to_string();
                    }
                }
            }
            Err(Error::Resample { attempts: max_attempts.max(1), last })
        })
        .collect()
}

/// Sample standard deviation (divisor `n − 1`).
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn wald_interval(theta: f64, se: f64, level: f64) -> (f64, f64) {
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    (theta - z * se, theta + z * se)
}

/// Bootstrap replicates of every estimator, sharing the resamples.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub aipw: Vec<f64>,
    pub acw: Vec<f64>,
    pub adapt: Vec<f64>,
}

impl BootstrapDraws {
    pub fn draws(&self, kind: EstimatorKind) -> &[f64] {
        match kind {
            EstimatorKind::Aipw => &self.aipw,
            EstimatorKind::Acw => &self.acw,
            EstimatorKind::Adapt => &self.adapt,
        }
    }

    pub fn se(&self, kind: EstimatorKind) -> f64 {
        sample_sd(self.draws(kind))
    }
}

/// Bootstraps all estimators the dataset supports. Unless `refit_lambda` is
/// set, `λ` stays at `lambda` in every resample.
pub fn bootstrap_all(
    dataset: &Dataset,
    tau: f64,
    options: &EstimatorOptions,
    seed: u64,
    lambda: Option<f64>,
) -> Result<BootstrapDraws> {
    if options.bootstrap < 2 {
        return Err(Error::Config(format!("bootstrap size must be at least 2, got {}", options.bootstrap)));
    }
    let mut opts = options.clone();
    if !options.refit_lambda {
        opts.lambda = lambda.or(options.lambda);
    }
    let fits = bootstrap_with(dataset, options.bootstrap, derive_seed(seed, BOOT_STREAM), options.max_resample_attempts, |d, s| {
        cross_fit(d, tau, &opts, s).map(|c| (c.aipw, c.acw, c.adapt))
    })?;
    let mut out = BootstrapDraws::default();
    for (a, c, d) in fits {
        out.aipw.push(a);
        if let Some(c) = c {
            out.acw.push(c);
        }
        if let Some(d) = d {
            out.adapt.push(d);
        }
    }
    Ok(out)
}

/// Returns `(se, ci)`.
pub fn bootstrap(
    dataset: &Dataset,
    kind: EstimatorKind,
    tau: f64,
    options: &EstimatorOptions,
    seed: u64,
) -> Result<(f64, (f64, f64))> {
    let point = point_estimate(dataset, kind, tau, options, seed)?;
    let data = if kind == EstimatorKind::Aipw { dataset.trial_only() } else { dataset.clone() };
    let draws = bootstrap_all(&data, tau, options, seed, point.lambda)?;
    let se = draws.se(kind);
    Ok((se, wald_interval(point.theta(kind).expect("estimate present"), se, options.level)))
}

fn point_estimate(dataset: &Dataset, kind: EstimatorKind, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<CrossFit> {
    match kind {
        EstimatorKind::Aipw => cross_fit(&dataset.trial_only(), tau, options, seed),
        EstimatorKind::Acw | EstimatorKind::Adapt => {
            dataset.require_externals()?;
            cross_fit(dataset, tau, options, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub kind: EstimatorKind,
    pub theta_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub tau: f64,
    pub n_trial: usize,
    pub n_external: usize,
    pub n_borrowed: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Point estimate plus bootstrap inference for one estimator.
pub fn estimate(dataset: &Dataset, kind: EstimatorKind, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<EstimateReport> {
    let point = point_estimate(dataset, kind, tau, options, seed)?;
    let theta = point.theta(kind).expect("estimate present");
    let data = if kind == EstimatorKind::Aipw { dataset.trial_only() } else { dataset.clone() };
    let draws = bootstrap_all(&data, tau, options, seed, point.lambda)?;
    let se = draws.se(kind);
    Ok(EstimateReport {
        kind,
        theta_hat: theta,
        se,
        ci: wald_interval(theta, se, options.level),
        tau,
        n_trial: dataset.n_trial(),
        n_external: dataset.n_external(),
        n_borrowed: point.n_borrowed(kind),
        lambda: if kind == EstimatorKind::Adapt { point.lambda } else { None },
        seed,
    })
}

pub fn estimate_aipw(dataset: &Dataset, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<EstimateReport> {
    estimate(dataset, EstimatorKind::Aipw, tau, options, seed)
}

pub fn estimate_acw(dataset: &Dataset, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<EstimateReport> {
    estimate(dataset, EstimatorKind::Acw, tau, options, seed)
}

pub fn estimate_adapt(dataset: &Dataset, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<EstimateReport> {
    estimate(dataset, EstimatorKind::Adapt, tau, options, seed)
}

/// All three estimators from one cross-fit, with shared bootstrap resamples
/// when `options.bootstrap ≥ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllEstimates {
    pub point: CrossFit,
    pub draws: Option<BootstrapDraws>,
}

pub fn estimate_all(dataset: &Dataset, tau: f64, options: &EstimatorOptions, seed: u64) -> Result<AllEstimates> {
    dataset.require_externals()?;
    let point = cross_fit(dataset, tau, options, seed)?;
    let draws = if options.bootstrap >= 2 {
        Some(bootstrap_all(dataset, tau, options, seed, point.lambda)?)
    } else {
        None
    };
    Ok(AllEstimates { point, draws })
}
