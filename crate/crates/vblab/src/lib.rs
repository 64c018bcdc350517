//! Experiment harness for the vblab estimators: configuration, seeded
//! replication sweeps, checks and atomic report output.

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{CheckSpec, ConfigError, Estimator, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentReport, Record};

/// Package version plus the random-number generator identifier.
pub fn code_version() -> String {
    format!("vblab {}", env!("CARGO_PKG_VERSION"))
}

/// Worker count: explicit value, else `VBLAB_JOBS`, else 1.
pub fn resolve_jobs(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var("VBLAB_JOBS").ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&j| j > 0)
        .unwrap_or(1)
}
