//! Restricted-mean-survival-time treatment effects for randomized trials
//! augmented with external controls.
//!
//! The crate provides trial-only AIPW, full-borrowing ACW and selective
//! borrowing estimators built from cross-fitted efficient influence
//! functions, together with a simulation harness for benchmarking them.

pub mod bench;
pub mod data;
pub mod eif;
pub mod error;
pub mod estimator;
pub mod nuisance;
pub mod rng;
pub mod selector;
pub mod sim;

pub use data::{load_dataset, write_dataset, Dataset, SubjectRecord, TimeGrid};
pub use error::{Error, Result};
pub use estimator::{
    bootstrap, cross_fit, estimate, estimate_acw, estimate_adapt, estimate_aipw, estimate_all, EstimateReport,
    EstimatorKind, EstimatorOptions,
};
pub use sim::{simulate, true_theta, Setting, SimulationConfig};
