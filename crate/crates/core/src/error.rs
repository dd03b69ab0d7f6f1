use thiserror::Error;

/// Errors produced anywhere in the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid record at line {line}: {message}")]
    Validity { line: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("intercept calibration failed: {0}")]
    Calibration(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("separation: {0}")]
    Separation(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    /// A censoring stratum had no censored subjects; callers should use `S^C = 1`.
    #[error("no censored subjects in stratum; use the constant censoring model")]
    NoCensoring,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("fold error: {0}")]
    Fold(String),

    #[error("bootstrap resample failed after {attempts} attempts: {last}")]
    Resample { attempts: usize, last: String },

    #[error("fitting {which} failed: {source}")]
    Nuisance {
        which: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("benchmark aborted: {0}")]
    Benchmark(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn nuisance(which: &'static str, source: Error) -> Self {
        Error::Nuisance { which, source: Box::new(source) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
