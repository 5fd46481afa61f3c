//! The fork phase.
//!
//! Rounds look like FedAvg except that every group averages only its own sampled members. On
//! eligible rounds each device compares its validation loss `l` with its group's losses: when
//! `l - min > h_f * sigma` (population standard deviation) it tries every live group model and
//! moves to the best one, or into a fresh group when its own group is still the best. All
//! decisions are computed against the same snapshot and committed together at the end of the
//! round.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::fedavg::{check_participants, train_devices};
use super::{
    average_weights, sample_sorted, DeviceState, FederationError, FederationState, GroupId,
    GroupTable, Phase, RoundObserver, RoundView,
};
use crate::learner::{forward_eval, LearnerError, ModelParams, TrainConfig};
use crate::seed::Purpose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForkPolicy {
    /// Outlier threshold multiplier on the group's loss standard deviation.
    pub h_f: f64,
    pub warmup_rounds: usize,
    pub cooldown_from_end: usize,
    pub min_gap: usize,
    /// Devices leaving the same group for a fresh one in the same round share that fresh group.
    pub coalesce_new_groups: bool,
    pub sigma_scope: SigmaScope,
}

/// Which devices' losses the threshold's standard deviation is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaScope {
    /// Members of the device's own group.
    Group,
    /// Every device in the federation.
    Network,
}

impl Default for ForkPolicy {
    fn default() -> Self {
        Self {
            // (max - min) / sigma >= 2 for any spread-out group, so anything lower forks every round
            h_f: 2.0,
            warmup_rounds: 5,
            cooldown_from_end: 5,
            min_gap: 4,
            coalesce_new_groups: false,
            sigma_scope: SigmaScope::Group,
        }
    }
}

impl ForkPolicy {
    /// A policy under which no device ever crosses the threshold.
    pub fn never_fork() -> Self {
        Self {
            h_f: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        if self.h_f.is_nan() || self.h_f <= 0.0 {
            return Err(FederationError::InvalidArgument(format!(
                "h_f must be > 0, got {}",
                self.h_f
            )));
        }
        if self.warmup_rounds == 0 || self.min_gap == 0 {
            return Err(FederationError::InvalidArgument(
                "warmup_rounds and min_gap must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether the policy uses the default eligibility schedule, which the analytic transfer bound
    /// assumes.
    pub fn has_default_schedule(&self) -> bool {
        let d = Self::default();
        self.warmup_rounds == d.warmup_rounds
            && self.cooldown_from_end == d.cooldown_from_end
            && self.min_gap == d.min_gap
    }
}

/// Whether 1-indexed round `t` of `total` may fork, given the previous eligible round.
pub fn fork_eligible(
    t: usize,
    total: usize,
    last_eligible: Option<usize>,
    policy: &ForkPolicy,
) -> bool {
    t > policy.warmup_rounds
        && t + policy.cooldown_from_end <= total
        && last_eligible.is_none_or(|last| t >= last + policy.min_gap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForkDecision {
    Stay,
    MoveTo(GroupId),
    NewGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForkOutcome {
    pub decision: ForkDecision,
    /// Models of other groups the device had to fetch and evaluate.
    pub foreign_evaluations: usize,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Decides where one device goes. `group_losses` holds the current validation loss of every
/// member of the device's group, keyed by device id.
pub fn fork_decision(
    device: &DeviceState,
    group_losses: &BTreeMap<usize, f64>,
    groups: &GroupTable,
    h_f: f64,
) -> Result<ForkOutcome, LearnerError> {
    let losses: Vec<f64> = group_losses.values().copied().collect();
    fork_decision_with_spread(device, group_losses, population_std(&losses), groups, h_f)
}

/// As [`fork_decision`] with the standard deviation supplied by the caller.
pub fn fork_decision_with_spread(
    device: &DeviceState,
    group_losses: &BTreeMap<usize, f64>,
    sigma: f64,
    groups: &GroupTable,
    h_f: f64,
) -> Result<ForkOutcome, LearnerError> {
    let stay = ForkOutcome {
        decision: ForkDecision::Stay,
        foreign_evaluations: 0,
    };
    let Some(&own) = group_losses.get(&device.device_id) else {
        return Err(LearnerError::InvalidConfig(format!(
            "no loss reported for device {}",
            device.device_id
        )));
    };
    let min = group_losses.values().copied().fold(f64::INFINITY, f64::min);
    let excess = own - min;
    if excess <= 0.0 || excess <= h_f * sigma {
        return Ok(stay);
    }

    let validation = device.shard.validation();
    let mut best: Option<(GroupId, f64)> = None;
    for (id, g) in groups.iter() {
        let loss = forward_eval(&g.model, validation)?.mean_loss;
        // groups iterate in id order, so strict < keeps the lowest id on ties
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((id, loss));
        }
    }
    let (target, _) = best.expect("at least the device's own group is live");
    let decision = if target == device.group_id {
        ForkDecision::NewGroup
    } else {
        ForkDecision::MoveTo(target)
    };
    Ok(ForkOutcome {
        decision,
        foreign_evaluations: groups.len() - 1,
    })
}

/// Runs `rounds` fork rounds. Every device must start in a single shared group.
pub fn run_fork_phase(
    state: &mut FederationState,
    rounds: usize,
    k: usize,
    cfg: &TrainConfig,
    policy: &ForkPolicy,
    observer: &mut dyn RoundObserver,
) -> Result<(), FederationError> {
    cfg.validate()?;
    policy.validate()?;
    check_participants(state, k)?;
    if state.group_table.len() != 1 {
        return Err(FederationError::InvalidArgument(
            "the fork phase starts from a single group".into(),
        ));
    }
    let all: Vec<usize> = (0..state.num_devices()).collect();
    let n = all.len() as u64;
    let mut last_eligible = None;

    for t in 1..=rounds {
        state.round += 1;
        let round = state.round;
        let mut rng = state.seeds.rng(Purpose::Sample, round as u64, 0);
        let sampled = sample_sorted(&mut rng, &all, k);
        let trained = train_devices(state, &sampled, cfg)?;

        for gid in state.group_table.ids() {
            let (models, counts): (Vec<&ModelParams>, Vec<usize>) = sampled
                .iter()
                .zip(&trained)
                .filter(|(&i, _)| state.devices[i].group_id == gid)
                .map(|(&i, m)| (m, state.devices[i].shard.n_k()))
                .unzip();
            if models.is_empty() {
                continue;
            }
            let avg = average_weights(&models, &counts)?;
            state.group_table.get_mut(gid).expect("live group").model = avg;
        }
        state.deploy_group_models();
        state
            .ledger
            .record(round, cfg.local_epochs as u64 * k as u64, 2 * k as u64 + n)?;
        state.evaluate_devices(&all)?;

        if fork_eligible(t, rounds, last_eligible, policy) {
            last_eligible = Some(t);
            let extra = fork_round(state, policy)?;
            state.ledger.record(round, 0, extra)?;
        }

        state.check_invariants()?;
        observer.on_round(&RoundView {
            phase: Phase::Fork,
            round,
            state,
            merge: None,
        });
    }
    Ok(())
}

/// Decides for every device against the current snapshot, then commits all moves at once.
/// Returns the transfers spent on foreign evaluations and new-group seeding.
fn fork_round(state: &mut FederationState, policy: &ForkPolicy) -> Result<u64, FederationError> {
    let round = state.round;
    let mut losses_by_group: BTreeMap<GroupId, BTreeMap<usize, f64>> = BTreeMap::new();
    for d in &state.devices {
        let loss = d.last_loss().expect("devices were evaluated this round");
        losses_by_group
            .entry(d.group_id)
            .or_default()
            .insert(d.device_id, loss);
    }

    let network: Vec<f64> = state
        .devices
        .iter()
        .map(|d| d.last_loss().expect("evaluated"))
        .collect();
    let network_sigma = population_std(&network);
    let outcomes: Vec<ForkOutcome> = state
        .devices
        .par_iter()
        .map(|d| {
            let losses = &losses_by_group[&d.group_id];
            let sigma = match policy.sigma_scope {
                SigmaScope::Group => population_std(&losses.values().copied().collect::<Vec<_>>()),
                SigmaScope::Network => network_sigma,
            };
            fork_decision_with_spread(d, losses, sigma, &state.group_table, policy.h_f).map_err(
                |source| FederationError::Training {
                    round,
                    device: d.device_id,
                    source,
                },
            )
        })
        .collect::<Result<_, _>>()?;

    let mut extra: u64 = outcomes.iter().map(|o| o.foreign_evaluations as u64).sum();
    let mut fresh_by_origin: BTreeMap<GroupId, GroupId> = BTreeMap::new();
    for (i, outcome) in outcomes.iter().enumerate() {
        let origin = state.devices[i].group_id;
        let target = match outcome.decision {
            ForkDecision::Stay => continue,
            ForkDecision::MoveTo(j) => j,
            ForkDecision::NewGroup => {
                let reuse = policy
                    .coalesce_new_groups
                    .then(|| fresh_by_origin.get(&origin).copied())
                    .flatten();
                match reuse {
                    Some(j) => j,
                    None => {
                        let seed_model = state.group_table.get(origin).expect("live").model.clone();
                        let j = state.group_table.create(seed_model, round);
                        fresh_by_origin.insert(origin, j);
                        extra += 1;
                        j
                    }
                }
            }
        };
        state.threshold_crossings += 1;
        state.group_table.move_device(i, origin, target);
        let d = &mut state.devices[i];
        d.group_id = target;
        d.current_model
            .clone_from(&state.group_table.get(target).expect("live").model);
    }
    state.group_table.retire_empty();
    Ok(extra)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eligible_rounds(total: usize, policy: &ForkPolicy) -> Vec<usize> {
        let mut last = None;
        let mut out = Vec::new();
        for t in 1..=total {
            if fork_eligible(t, total, last, policy) {
                last = Some(t);
                out.push(t);
            }
        }
        out
    }

    #[test]
    fn default_schedule() {
        let p = ForkPolicy::default();
        assert_eq!(eligible_rounds(25, &p), vec![6, 10, 14, 18]);
        assert!(eligible_rounds(10, &p).is_empty());
        for total in 1..40 {
            assert!(!fork_eligible(1, total, None, &p));
        }
    }

    #[test]
    fn policy_validation() {
        assert!(ForkPolicy::default().validate().is_ok());
        assert!(ForkPolicy::never_fork().validate().is_ok());
        assert!(ForkPolicy {
            h_f: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ForkPolicy {
            min_gap: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn std_is_population() {
        let s = population_std(&[0.1, 0.1, 0.9]);
        assert!((s - 0.377_123_616_632_824).abs() < 1e-12);
    }
}
