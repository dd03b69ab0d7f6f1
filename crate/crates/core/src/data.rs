//! Subject records, dataset CSV ingestion and the time grid shared by every
//! time integral.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data source indicator.
pub const TRIAL: u8 = 1;
pub const EXTERNAL: u8 = 0;

/// One observed unit: follow-up time, event flag, arm, covariates and source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u64,
    /// Observed time `min(T, C)`.
    pub y: f64,
    /// 1 when the event was observed, 0 when censored.
    pub delta: u8,
    pub a: u8,
    pub x: Vec<f64>,
    /// 1 = trial, 0 = external control.
    pub r: u8,
}

impl SubjectRecord {
    pub fn is_trial(&self) -> bool {
        self.r == TRIAL
    }

    pub fn is_event(&self) -> bool {
        self.delta == 1
    }

    /// Index of the (R, A) design cell: 0 = external, 1 = trial control, 2 = trial treated.
    pub fn cell(&self) -> usize {
        if self.r == EXTERNAL {
            0
        } else if self.a == 0 {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.y.is_finite() || self.y < 0.0 {
            return Err(format!("follow-up time must be finite and nonnegative, got {}", self.y));
        }
        if self.delta > 1 {
            return Err(format!("delta must be 0 or 1, got {}", self.delta));
        }
        if self.a > 1 {
            return Err(format!("a must be 0 or 1, got {}", self.a));
        }
        if self.r > 1 {
            return Err(format!("r must be 0 or 1, got {}", self.r));
        }
        if self.r == EXTERNAL && self.a == 1 {
            return Err("external control (r=0) cannot be treated (a=1)".into());
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err("covariates must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<SubjectRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate().map_err(|message| Error::Validity { line: i + 2, message })?;
            if rec.x.len() != p {
                return Err(Error::Validity {
                    line: i + 2,
                    message: format!("expected {p} covariates, found {}", rec.x.len()),
                });
            }
            if !seen.insert(rec.id) {
                return Err(Error::Validity { line: i + 2, message: format!("duplicate id {}", rec.id) });
            }
        }
        Ok(Dataset { records, covariate_names })
    }

    /// Default covariate labels `x1..xp`.
    pub fn default_names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn p(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_trial(&self) -> usize {
        self.records.iter().filter(|r| r.is_trial()).count()
    }

    pub fn n_external(&self) -> usize {
        self.records.len() - self.n_trial()
    }

    /// Counts per (R, A) cell in [`SubjectRecord::cell`] order.
    pub fn cell_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for r in &self.records {
            counts[r.cell()] += 1;
        }
        counts
    }

    /// Copy holding only trial records.
    pub fn trial_only(&self) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| r.is_trial()).cloned().collect(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Checks the entry requirement shared by every estimator.
    pub fn require_both_arms(&self) -> Result<()> {
        let c = self.cell_counts();
        if c[1] == 0 || c[2] == 0 {
            return Err(Error::Contract(format!(
                "dataset needs trial-treated and trial-control records (treated={}, control={})",
                c[2], c[1]
            )));
        }
        Ok(())
    }

    pub fn require_externals(&self) -> Result<()> {
        if self.n_external() == 0 {
            return Err(Error::Contract("dataset has no external controls".into()));
        }
        Ok(())
    }
}

/// Reads a dataset from CSV with header `id,y,delta,a,r,x1,...,xp`.
pub fn load_dataset<R: Read>(source: R, p: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?
        .clone();

    let mut expected: Vec<String> = ["id", "y", "delta", "a", "r"].iter().map(|s| s.to_string()).collect();
    expected.extend(Dataset::default_names(p));
    for (j, want) in expected.iter().enumerate() {
        match headers.get(j) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(Error::Schema(format!("column {}: expected `{want}`, found `{got}`", j + 1)))
            }
            None => return Err(Error::Schema(format!("missing column `{want}`"))),
        }
    }
    if headers.len() > expected.len() {
        return Err(Error::Schema(format!("unexpected extra column `{}`", &headers[expected.len()])));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if row.len() != expected.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", expected.len(), row.len()),
            });
        }
        let field = |j: usize| -> Result<f64> {
            row[j].trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{}` is not numeric", expected[j], &row[j]),
            })
        };
        let flag = |j: usize| -> Result<u8> {
            row[j].trim().parse::<u8>().map_err(|_| Error::Parse {
                line,
                message: format!("column `{}`: `{}` is not a 0/1 flag", expected[j], &row[j]),
            })
        };
        let id = row[0].trim().parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("column `id`: `{}` is not an unsigned integer", &row[0]),
        })?;
        let x = (5..expected.len()).map(field).collect::<Result<Vec<_>>>()?;
        let rec = SubjectRecord { id, y: field(1)?, delta: flag(2)?, a: flag(3)?, r: flag(4)?, x };
        rec.validate().map_err(|message| Error::Validity { line, message })?;
        records.push(rec);
    }
    Dataset::new(records, Dataset::default_names(p))
}

/// Writes the dataset as CSV; floats use the shortest round-tripping representation.
pub fn write_dataset<W: Write>(dataset: &Dataset, sink: W) -> Result<()> {
    let mut w = std::io::BufWriter::new(sink);
    write!(w, "id,y,delta,a,r")?;
    for j in 1..=dataset.p() {
        write!(w, ",x{j}")?;
    }
    writeln!(w)?;
    for r in &dataset.records {
        write!(w, "{},{},{},{},{}", r.id, r.y, r.delta, r.a, r.r)?;
        for v in &r.x {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation times for the RMST integrals: strictly increasing, positive, ending at `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    tau: f64,
}

impl TimeGrid {
    pub fn new(mut times: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be positive, got {tau}")));
        }
        times.retain(|&t| t > 0.0 && t < tau);
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        times.push(tau);
        Ok(TimeGrid { times, tau })
    }

    /// All distinct observed times (events and censorings) up to `tau`.
    ///
    /// Every fitted step function changes only at observed times, so the
    /// left-Riemann sums over this grid are exact for step integrands.
    pub fn from_observed(dataset: &Dataset, tau: f64) -> Result<Self> {
        TimeGrid::new(dataset.records.iter().map(|r| r.y).collect(), tau)
    }

    /// Distinct observed event times up to `tau`.
    pub fn from_events(dataset: &Dataset, tau: f64) -> Result<Self> {
        TimeGrid::new(dataset.records.iter().filter(|r| r.is_event()).map(|r| r.y).collect(), tau)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Left endpoints of the integration cells: `0, t_1, ..., t_{G-1}`.
    pub fn left_endpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.times.len());
        out.push(0.0);
        out.extend_from_slice(&self.times[..self.times.len() - 1]);
        out
    }

    /// Widths of the integration cells, aligned with [`Self::left_endpoints`].
    pub fn widths(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let w = t - prev;
                prev = t;
                w
            })
            .collect()
    }

    /// Left-Riemann integral of values sampled at the left endpoints.
    pub fn integrate_left(&self, values_at_left: &[f64]) -> Result<f64> {
        if values_at_left.len() != self.times.len() {
            return Err(Error::Contract(format!(
                "{} values supplied for a grid of {} cells",
                values_at_left.len(),
                self.times.len()
            )));
        }
        let mut prev = 0.0;
        let mut acc = 0.0;
        for (v, &t) in values_at_left.iter().zip(&self.times) {
            acc += v * (t - prev);
            prev = t;
        }
        Ok(acc)
    }
}
