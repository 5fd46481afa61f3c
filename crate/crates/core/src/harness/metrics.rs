//! Per-round metrics and their CSV encoding.
//!
//! One row per round. Per-device and per-archetype values are lists, written into a single cell
//! joined with `;` so the column set stays fixed however many devices a run has.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::federation::Phase;

pub const HEADER: [&str; 12] = [
    "round",
    "phase",
    "group_count",
    "device_id",
    "group_id",
    "val_loss",
    "val_acc",
    "archetype_id",
    "archetype_test_acc",
    "global_test_acc",
    "updates_delta",
    "transfers_delta",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no metrics rows to write")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub phase: Phase,
    pub group_count: usize,
    /// Devices evaluated this round, ascending.
    pub device_ids: Vec<usize>,
    pub group_ids: Vec<usize>,
    pub val_loss: Vec<f64>,
    /// Percent.
    pub val_acc: Vec<f64>,
    pub archetype_ids: Vec<usize>,
    /// Mean over each archetype's devices of their model's accuracy on the balanced test examples
    /// of that archetype's labels.
    pub archetype_test_acc: Vec<f64>,
    /// Shared model on the whole balanced test set; absent while groups train separately.
    pub global_test_acc: Option<f64>,
    pub updates_delta: u64,
    pub transfers_delta: u64,
}

fn join<T>(values: &[T], f: impl Fn(&T) -> String) -> String {
    values.iter().map(f).collect::<Vec<_>>().join(";")
}

fn fixed(v: &f64) -> String {
    format!("{v:.6}")
}

impl MetricsRow {
    fn record(&self) -> [String; 12] {
        [
            self.round.to_string(),
            self.phase.as_str().to_string(),
            self.group_count.to_string(),
            join(&self.device_ids, usize::to_string),
            join(&self.group_ids, usize::to_string),
            join(&self.val_loss, fixed),
            join(&self.val_acc, fixed),
            join(&self.archetype_ids, usize::to_string),
            join(&self.archetype_test_acc, fixed),
            self.global_test_acc.as_ref().map(fixed).unwrap_or_default(),
            self.updates_delta.to_string(),
            self.transfers_delta.to_string(),
        ]
    }
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), MetricsError> {
    let file = std::fs::File::create(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_metrics(rows, std::io::BufWriter::new(file))
}
