//! Experiment orchestration: training, the three online scenarios, summaries.

mod config;
mod online;
pub mod selfcheck;
mod training;

pub use config::{CaseId, ScenarioConfig, SCHEMA_VERSION};
pub use online::{
    bound_series, online_rows, read_report_csv, run_online, static_error, verify_bounds, write_report_csv, BoundSeriesRow, DIVERGENCE_LIMIT,
    BoundVerdict, ReportRow, RunReport, RunSummary, BOUND_SLACK, REPORT_HEADER,
};
pub use training::{
    dataset_loss, nominal_dataset, run_training, run_training_with, write_training_log, EpochRecord, TrainingOutcome,
};

use crate::error::Result;

/// A trained network and its online run.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub training: TrainingOutcome,
    pub report: RunReport,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    let training = run_training(cfg)?;
    let mut report = run_online(cfg, &training.checkpoint)?;
    report.summary.training_final_loss = Some(training.final_loss);
    Ok(ScenarioResult {
        config: cfg.clone(),
        training,
        report,
    })
}
