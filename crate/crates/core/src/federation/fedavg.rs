use rayon::prelude::*;

use super::{
    average_weights, sample_sorted, FederationError, FederationState, Phase, RoundObserver,
    RoundView,
};
use crate::learner::{sgd_epochs, ModelParams, TrainConfig};
use crate::seed::Purpose;

/// Trains each listed device from the model it currently holds. Results keep the input order.
pub(crate) fn train_devices(
    state: &FederationState,
    ids: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<ModelParams>, FederationError> {
    let round = state.round;
    ids.par_iter()
        .map(|&i| {
            let d = &state.devices[i];
            let seed = state.seeds.seed(Purpose::Train, i as u64, round as u64);
            sgd_epochs(&d.current_model, d.shard.train(), cfg, seed).map_err(|source| {
                FederationError::Training {
                    round,
                    device: i,
                    source,
                }
            })
        })
        .collect()
}

pub(crate) fn check_participants(state: &FederationState, k: usize) -> Result<(), FederationError> {
    let n = state.num_devices();
    if k == 0 || k > n {
        return Err(FederationError::InvalidArgument(format!(
            "participants per round must be in [1, {n}], got {k}"
        )));
    }
    Ok(())
}

/// Federated averaging over a single group holding every device.
///
/// Each round samples `k` devices, trains them for `cfg.local_epochs` from the global model,
/// averages with `n_k` weights and deploys the result to all devices.
pub fn run_fedavg(
    state: &mut FederationState,
    rounds: usize,
    k: usize,
    cfg: &TrainConfig,
    observer: &mut dyn RoundObserver,
) -> Result<ModelParams, FederationError> {
    cfg.validate()?;
    check_participants(state, k)?;
    if state.group_table.len() != 1 {
        return Err(FederationError::InvalidArgument(
            "FedAvg needs every device in one group".into(),
        ));
    }
    let gid = state.group_table.ids()[0];
    let all: Vec<usize> = (0..state.num_devices()).collect();
    let n = all.len() as u64;

    for _ in 0..rounds {
        state.round += 1;
        let round = state.round;
        let mut rng = state.seeds.rng(Purpose::Sample, round as u64, 0);
        let sampled = sample_sorted(&mut rng, &all, k);

        let trained = train_devices(state, &sampled, cfg)?;
        let counts: Vec<usize> = sampled
            .iter()
            .map(|&i| state.devices[i].shard.n_k())
            .collect();
        let refs: Vec<&ModelParams> = trained.iter().collect();
        let global = average_weights(&refs, &counts)?;

        state.group_table.get_mut(gid).expect("live group").model = global;
        state.deploy_group_models();
        state
            .ledger
            .record(round, cfg.local_epochs as u64 * k as u64, 2 * k as u64 + n)?;
        state.evaluate_devices(&all)?;
        state.check_invariants()?;
        observer.on_round(&RoundView {
            phase: Phase::FedAvg,
            round,
            state,
            merge: None,
        });
    }
    Ok(state
        .group_table
        .get(gid)
        .expect("live group")
        .model
        .clone())
}
