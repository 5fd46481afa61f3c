//! Datasets, loaders, synthetic blobs, and the archetype partitioner that hands every simulated
//! device a label-skewed shard.

mod dataset;
mod io;
mod partition;
mod synthetic;

pub use dataset::LabeledDataset;
pub use io::{load_dataset, DatasetFormat};
pub use partition::{partition_archetypes, ArchetypeSpec, DeviceShard};
pub use synthetic::{class_means, gen_synthetic};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {format} file: {reason}")]
    Malformed {
        path: PathBuf,
        format: &'static str,
        reason: String,
    },
    #[error("row {row}: label {label} outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid archetype: {0}")]
    InvalidArchetype(String),
    #[error("not enough examples of class {class}: need {needed}, have {available}")]
    InsufficientExamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
