//! The vehicle reach-transit-avoid benchmark: configuration, instance
//! sampling, metrics and the staged pipeline.

mod config;
mod metrics;
mod pipeline;
mod sampling;

use std::path::Path;

use thiserror::Error;

pub use config::{
    ClusteringConfig, ExperimentConfig, InitSampling, ObstacleSampling, Region, Regions, Workspace,
};
pub use metrics::{
    accuracy, distance_cost, joint_success_set, report, CaseResult, ControllerMetrics, MetricsReport,
};
pub use pipeline::{Pipeline, Stage, YieldReport};
pub use sampling::sample_instance;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("obstacle sampling for seed {seed} gave up after {draws} draws")]
    Sampling { seed: u64, draws: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("stage {stage} failed (seed {seed}): {cause}")]
    Stage {
        stage: &'static str,
        seed: u64,
        cause: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;
