//! Metrics, reports, experiment configs and the run orchestration behind the
//! command-line tool.

mod config;
mod metrics;
mod run;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use config::{BertramSection, DataPaths, ExperimentConfig, Task};
pub use metrics::{
    class_f1, macro_f1, per_language_report, render_table, LanguageScore, OverallMode, Report,
    RunMetadata,
};
pub use run::{
    evaluate_predictions, load_report, run_experiment, run_experiment_with, tiny_factory_parts,
    Artifacts,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} backend cannot be constructed from a config; supply a backend factory")]
    Backend(crate::adapter::BackendKind),
    #[error("report: {0}")]
    Report(String),
}
