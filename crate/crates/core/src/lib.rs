//! Deterministic simulator for fork/merge/consolidate federated learning (FedFMC) and the FedAvg
//! baseline, run over simulated devices holding label-skewed data.
//!
//! - [`learner`]: dense MLP, SGD, EWC penalty and Fisher diagonal.
//! - [`data`]: loaders, synthetic blobs, archetype partitioner.
//! - [`federation`]: FedAvg, fork phase, merge-and-consolidate phase.
//! - [`ledger`]: update/transfer accounting and the analytic cost formulas.
//! - [`harness`]: configs, presets, experiment runner, metrics CSV, checkpoints.

pub mod data;
pub mod federation;
pub mod harness;
pub mod learner;
pub mod ledger;
pub mod seed;
