//! Server and device state for the federation protocols: FedAvg, the fork phase that splits
//! devices into groups by validation-loss outliership, and the merge phase that folds the group
//! models back into one model under an EWC anchor.

mod average;
mod fedavg;
mod fork;
mod merge;
mod state;

pub use average::average_weights;
pub use fedavg::run_fedavg;
pub use fork::{
    fork_decision, fork_decision_with_spread, fork_eligible, run_fork_phase, ForkDecision,
    ForkOutcome, ForkPolicy, SigmaScope,
};
pub use merge::{merge_converged, run_merge_consolidate, MergePolicy};
pub use state::{DeviceState, FederationState, Group, GroupId, GroupTable};

use thiserror::Error;

use crate::learner::{LearnerError, ModelParams};
use crate::ledger::CostError;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("round {round}, device {device}: {source}")]
    Training {
        round: usize,
        device: usize,
        #[source]
        source: LearnerError,
    },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invariant violated after round {round}: {what}")]
    Invariant { round: usize, what: String },
}

/// Which protocol stage produced a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    FedAvg,
    Fork,
    Merge,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::FedAvg => "fedavg",
            Phase::Fork => "fork",
            Phase::Merge => "merge",
        }
    }
}

/// Merge-phase context handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct MergeView<'a> {
    pub working_model: &'a ModelParams,
    /// Groups folded into the working model so far, in merge order (includes the one in progress).
    pub merged_groups: &'a [GroupId],
    /// Round index within the current group's merge loop, starting at 1.
    pub group_round: usize,
    /// Accuracy (percent) of the working model over the pooled validation sets of active devices.
    pub active_accuracy: f64,
    /// True on the last merge round of the group in progress.
    pub group_finished: bool,
}

/// Snapshot passed to observers after every committed round.
#[derive(Debug, Clone, Copy)]
pub struct RoundView<'a> {
    pub phase: Phase,
    pub round: usize,
    pub state: &'a FederationState,
    pub merge: Option<MergeView<'a>>,
}

pub trait RoundObserver {
    fn on_round(&mut self, view: &RoundView<'_>);
}

impl<F: FnMut(&RoundView<'_>)> RoundObserver for F {
    fn on_round(&mut self, view: &RoundView<'_>) {
        self(view)
    }
}

/// Observer that ignores every round.
pub struct NoopObserver;

impl RoundObserver for NoopObserver {
    fn on_round(&mut self, _: &RoundView<'_>) {}
}

/// Uniform sample of `k` entries of `pool` without replacement, returned in ascending order.
pub(crate) fn sample_sorted(rng: &mut impl rand::Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}
