//! The merge-and-consolidate phase.
//!
//! Groups are folded in id order into one working model. Before each incoming group the working
//! model becomes the EWC anchor and the previously active devices report Fisher diagonals on
//! their own training data, which the server averages with `n_k` weights. The incoming devices
//! then receive the working model and a sampled subset of all active devices trains with the EWC
//! penalty (`lambda = 1 / groups merged so far`) until the accuracy window flattens or the round
//! budget for that group runs out.

use rayon::prelude::*;

use super::{
    average_weights, sample_sorted, FederationError, FederationState, GroupId, MergeView, Phase,
    RoundObserver, RoundView,
};
use crate::learner::{compute_fisher_diag, ewc_sgd_epochs, FisherDiag, ModelParams, TrainConfig};
use crate::seed::Purpose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergePolicy {
    pub max_rounds_per_group: usize,
    pub window: usize,
    /// Percentage points.
    pub accuracy_gap: f64,
    pub participation_fraction: f64,
    /// With EWC off the anchor penalty is dropped (lambda = 0).
    pub ewc_enabled: bool,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            max_rounds_per_group: 20,
            window: 5,
            accuracy_gap: 1.0,
            participation_fraction: 0.5,
            ewc_enabled: true,
        }
    }
}

impl MergePolicy {
    pub fn validate(&self) -> Result<(), FederationError> {
        if self.max_rounds_per_group == 0 || self.window == 0 {
            return Err(FederationError::InvalidArgument(
                "max_rounds_per_group and window must be >= 1".into(),
            ));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(FederationError::InvalidArgument(format!(
                "participation_fraction {} outside (0, 1]",
                self.participation_fraction
            )));
        }
        if !(self.accuracy_gap.is_finite() && self.accuracy_gap >= 0.0) {
            return Err(FederationError::InvalidArgument(
                "accuracy_gap must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// True once the last `policy.window` accuracies are all in and their maximum exceeds their mean
/// by less than `policy.accuracy_gap`.
pub fn merge_converged(history: &[f64], policy: &MergePolicy) -> bool {
    if history.len() < policy.window {
        return false;
    }
    let window = &history[history.len() - policy.window..];
    let max = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    max - mean < policy.accuracy_gap
}

pub fn run_merge_consolidate(
    state: &mut FederationState,
    cfg: &TrainConfig,
    policy: &MergePolicy,
    observer: &mut dyn RoundObserver,
) -> Result<ModelParams, FederationError> {
    cfg.validate()?;
    policy.validate()?;
    let order = state.group_table.ids();
    let Some(&first) = order.first() else {
        return Err(FederationError::InvalidArgument(
            "no groups to merge".into(),
        ));
    };

    let mut working = state.group_table.get(first).expect("live").model.clone();
    let mut active: Vec<usize> = state
        .group_table
        .get(first)
        .expect("live")
        .members
        .iter()
        .copied()
        .collect();
    let mut merged: Vec<GroupId> = vec![first];

    for &incoming in &order[1..] {
        let anchor = working.clone();
        let fisher = averaged_fisher(state, &active, &anchor)?;
        let fisher_uploads = active.len() as u64;

        let newcomers: Vec<usize> = state
            .group_table
            .get(incoming)
            .expect("live")
            .members
            .iter()
            .copied()
            .collect();
        for &i in &newcomers {
            state.devices[i].current_model.clone_from(&working);
        }
        state.group_table.get_mut(incoming).expect("live").model = working.clone();
        active.extend(&newcomers);
        active.sort_unstable();
        merged.push(incoming);

        let lambda = if policy.ewc_enabled {
            1.0 / merged.len() as f64
        } else {
            0.0
        };
        let ewc_cfg = TrainConfig {
            ewc_lambda: lambda,
            ..*cfg
        };
        let take = ((policy.participation_fraction * active.len() as f64).ceil() as usize)
            .clamp(1, active.len());

        let mut history = Vec::new();
        for group_round in 1..=policy.max_rounds_per_group {
            state.round += 1;
            let round = state.round;
            let mut rng = state.seeds.rng(Purpose::MergeSample, round as u64, 0);
            let sampled = sample_sorted(&mut rng, &active, take);

            let trained: Vec<ModelParams> = sampled
                .par_iter()
                .map(|&i| {
                    let d = &state.devices[i];
                    let seed = state
                        .seeds
                        .seed(Purpose::MergeTrain, i as u64, round as u64);
                    ewc_sgd_epochs(
                        &d.current_model,
                        d.shard.train(),
                        &anchor,
                        &fisher,
                        &ewc_cfg,
                        seed,
                    )
                    .map_err(|source| FederationError::Training {
                        round,
                        device: i,
                        source,
                    })
                })
                .collect::<Result<_, _>>()?;
            let counts: Vec<usize> = sampled
                .iter()
                .map(|&i| state.devices[i].shard.n_k())
                .collect();
            let refs: Vec<&ModelParams> = trained.iter().collect();
            working = average_weights(&refs, &counts)?;

            for &g in &merged {
                state.group_table.get_mut(g).expect("live").model = working.clone();
            }
            for &i in &active {
                state.devices[i].current_model.clone_from(&working);
            }
            let mut transfers = 2 * take as u64 + active.len() as u64;
            if group_round == 1 {
                transfers += fisher_uploads + newcomers.len() as u64;
            }
            state
                .merge_ledger
                .record(round, cfg.local_epochs as u64 * take as u64, transfers)?;
            state.evaluate_devices(&active)?;

            let active_accuracy = pooled_accuracy(state, &active);
            history.push(active_accuracy);
            let converged = merge_converged(&history, policy);
            let finished = converged || group_round == policy.max_rounds_per_group;

            state.check_invariants()?;
            observer.on_round(&RoundView {
                phase: Phase::Merge,
                round,
                state,
                merge: Some(MergeView {
                    working_model: &working,
                    merged_groups: &merged,
                    group_round,
                    active_accuracy,
                    group_finished: finished,
                }),
            });
            if converged {
                break;
            }
        }
    }
    Ok(working)
}

/// Fisher diagonals computed on each device's own data, averaged with `n_k` weights.
fn averaged_fisher(
    state: &FederationState,
    devices: &[usize],
    anchor: &ModelParams,
) -> Result<FisherDiag, FederationError> {
    let round = state.round;
    let parts: Vec<FisherDiag> = devices
        .par_iter()
        .map(|&i| {
            compute_fisher_diag(anchor, state.devices[i].shard.train()).map_err(|source| {
                FederationError::Training {
                    round,
                    device: i,
                    source,
                }
            })
        })
        .collect::<Result<_, _>>()?;
    let weighted: Vec<(&FisherDiag, f64)> = parts
        .iter()
        .zip(devices)
        .map(|(f, &i)| (f, state.devices[i].shard.n_k() as f64))
        .collect();
    Ok(FisherDiag::weighted_mean(&weighted)?)
}

/// Accuracy over the union of the devices' validation sets, from their latest evaluation.
fn pooled_accuracy(state: &FederationState, devices: &[usize]) -> f64 {
    let (correct, total) = devices.iter().fold((0.0, 0usize), |(c, t), &i| {
        let d = &state.devices[i];
        let n = d.shard.validation().len();
        (
            c + d.last_accuracy().unwrap_or(0.0) * n as f64 / 100.0,
            t + n,
        )
    });
    100.0 * correct / total as f64
}
