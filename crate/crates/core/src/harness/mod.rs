//! Experiment harness: configuration, the run directory and its stages,
//! evaluation, reports and the robustness protocols.

mod config;
mod eval;
mod paraphrase;
mod pipeline;
mod protocols;
mod report;

pub use config::{ExperimentConfig, MethodSection, Seeds};
pub use eval::{evaluate, metric_rows, read_results, write_results, MetricRow, ProbeResult};
pub use paraphrase::{resolve_endpoint, ParaphraseProvider, ParaphraseStats, ENDPOINT_ENV};
pub use pipeline::{
    build_model, cmd_gen_world, cmd_probe, cmd_report, cmd_train_base, cmd_unlearn, run_pipeline,
    RunDir, Stage,
};
pub use protocols::{
    cmd_continual, cmd_sft_attack, cmd_sweep, grad_check_suite, ContinualRow, GradCheckLine,
    SftRow, SweepCell, SweepSummary,
};
pub use report::{read_metric_csv, write_metric_csv};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing prerequisite: {path} not found; run {stage} first")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} postcondition failed: {reason}")]
    Postcondition { stage: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    World(#[from] crate::worldgen::WorldError),
    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
    #[error(transparent)]
    Unlearn(#[from] crate::unlearn::UnlearnError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
