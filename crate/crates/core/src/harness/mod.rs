//! Experiment plumbing: config files, bundled presets, the end-to-end runner, metrics CSV and
//! binary checkpoints.

mod checkpoint;
mod config;
mod experiment;
mod metrics;
mod presets;

pub use checkpoint::{
    load_checkpoint, load_model, save_checkpoint, save_model, Checkpoint, CheckpointError, MAGIC,
    VERSION,
};
pub use config::{
    defaults, parse_config, parse_config_str, Algorithm, ConfigError, DatasetSource, RunConfig,
};
pub use experiment::{
    archetype_oscillation, prepare_data, run_experiment, CostCheck, Experiment, GroupTrack,
    PreparedData, RunOutcome,
};
pub use metrics::{emit_metrics, write_metrics, MetricsError, MetricsRow, HEADER};
pub use presets::{load_preset, Preset, PRESETS};

use thiserror::Error;

use crate::data::DataError;
use crate::federation::FederationError;
use crate::learner::LearnerError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("model: {0}")]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
}
