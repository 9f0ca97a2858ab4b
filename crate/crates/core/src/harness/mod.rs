//! Experiment harness: configuration, sweeps, operator checks and reports.
//!
//! Every output byte is a function of the config (including its seed list).
//! Seeds and Monte Carlo chunks run in parallel but results are merged in a
//! fixed order, so the worker count never changes a report.

pub mod config;
pub mod opcheck;
pub mod report;
pub mod sweeps;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ExperimentConfig, ExperimentKind, Preset};
pub use opcheck::{run_opcheck, OpcheckReport};
pub use report::{ReportRow, RiskReport};
pub use sweeps::{run_dim_sweep, run_inference_sweep, run_misspec, run_risk_compare, run_task_sweep};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

macro_rules! run_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Run(e.to_string())
            }
        }
    )*};
}

run_error_from!(
    crate::theory::TheoryError,
    crate::pretrain::PretrainError,
    crate::predictors::PredictError,
    crate::opcalc::OpcalcError
);

/// Result of any experiment kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Risk(RiskReport),
    Opcheck(OpcheckReport),
}

impl Outcome {
    /// Writes the report files into the config's output directory.
    pub fn write(&self) -> Result<Vec<PathBuf>, HarnessError> {
        match self {
            Outcome::Risk(r) => r.write(&r.config.output_dir),
            Outcome::Opcheck(r) => r.write(&r.config.output_dir),
        }
    }

    pub fn notes(&self) -> &[String] {
        match self {
            Outcome::Risk(r) => &r.notes,
            Outcome::Opcheck(r) => &r.notes,
        }
    }
}

/// Dispatches on `cfg.experiment`.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    Ok(match cfg.experiment {
        ExperimentKind::TaskSweep => Outcome::Risk(run_task_sweep(cfg)?),
        ExperimentKind::DimSweep => Outcome::Risk(run_dim_sweep(cfg)?),
        ExperimentKind::InferenceSweep => Outcome::Risk(run_inference_sweep(cfg)?),
        ExperimentKind::Misspec => Outcome::Risk(run_misspec(cfg)?),
        ExperimentKind::RiskCompare => Outcome::Risk(run_risk_compare(cfg)?),
        ExperimentKind::Opcheck => Outcome::Opcheck(run_opcheck(cfg)?),
    })
}
