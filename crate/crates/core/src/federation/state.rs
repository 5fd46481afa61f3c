use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::FederationError;
use crate::data::DeviceShard;
use crate::learner::{forward_eval, ModelParams};
use crate::ledger::CostLedger;
use crate::seed::SeedStream;

pub type GroupId = usize;

/// A simulated edge device. It holds exactly one model at any time.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub device_id: usize,
    pub shard: DeviceShard,
    pub group_id: GroupId,
    pub current_model: ModelParams,
    pub loss_history: Vec<(usize, f64)>,
    pub acc_history: Vec<(usize, f64)>,
}

impl DeviceState {
    pub fn last_loss(&self) -> Option<f64> {
        self.loss_history.last().map(|&(_, l)| l)
    }

    pub fn last_accuracy(&self) -> Option<f64> {
        self.acc_history.last().map(|&(_, a)| a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub members: BTreeSet<usize>,
    pub model: ModelParams,
    pub created_round: usize,
}

/// Live groups keyed by id. Ids come from a counter and are never reused.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTable {
    groups: BTreeMap<GroupId, Group>,
    next_id: GroupId,
}

impl GroupTable {
    /// One group with id 0 holding every device.
    pub fn single(devices: impl IntoIterator<Item = usize>, model: ModelParams) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(
            0,
            Group {
                members: devices.into_iter().collect(),
                model,
                created_round: 0,
            },
        );
        Self { groups, next_id: 1 }
    }

    /// Rebuilds a table from explicit groups, e.g. after restoring a checkpoint.
    pub fn from_groups(groups: BTreeMap<GroupId, Group>, next_id: GroupId) -> Self {
        Self { groups, next_id }
    }

    pub fn get(&self, id: GroupId) -> Option<&Group> {
        self.groups.get(&id)
    }

    pub(crate) fn get_mut(&mut self, id: GroupId) -> Option<&mut Group> {
        self.groups.get_mut(&id)
    }

    pub fn ids(&self) -> Vec<GroupId> {
        self.groups.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &Group)> {
        self.groups.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn next_id(&self) -> GroupId {
        self.next_id
    }

    pub(crate) fn create(&mut self, model: ModelParams, created_round: usize) -> GroupId {
        let id = self.next_id;
        self.next_id += 1;
        self.groups.insert(
            id,
            Group {
                members: BTreeSet::new(),
                model,
                created_round,
            },
        );
        id
    }

    pub(crate) fn move_device(&mut self, device: usize, from: GroupId, to: GroupId) {
        if let Some(g) = self.groups.get_mut(&from) {
            g.members.remove(&device);
        }
        if let Some(g) = self.groups.get_mut(&to) {
            g.members.insert(device);
        }
    }

    /// Drops groups without members, returning their ids.
    pub(crate) fn retire_empty(&mut self) -> Vec<GroupId> {
        let empty: Vec<GroupId> = self
            .groups
            .iter()
            .filter(|(_, g)| g.members.is_empty())
            .map(|(&id, _)| id)
            .collect();
        for id in &empty {
            self.groups.remove(id);
        }
        empty
    }
}

/// Everything the simulated server knows, plus the devices it drives.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub devices: Vec<DeviceState>,
    pub group_table: GroupTable,
    pub round: usize,
    /// Costs of FedAvg and fork rounds.
    pub ledger: CostLedger,
    /// Costs of merge rounds, kept apart from the analytically bounded fork costs.
    pub merge_ledger: CostLedger,
    pub seeds: SeedStream,
    /// Fork decisions that left `Stay` over the whole run.
    pub threshold_crossings: usize,
}

impl FederationState {
    /// All devices in group 0 holding `initial`.
    pub fn new(
        shards: Vec<DeviceShard>,
        initial: ModelParams,
        master_seed: u64,
    ) -> Result<Self, FederationError> {
        if shards.is_empty() {
            return Err(FederationError::InvalidArgument("no devices".into()));
        }
        let devices: Vec<DeviceState> = shards
            .into_iter()
            .enumerate()
            .map(|(device_id, shard)| DeviceState {
                device_id,
                shard,
                group_id: 0,
                current_model: initial.clone(),
                loss_history: Vec::new(),
                acc_history: Vec::new(),
            })
            .collect();
        let group_table = GroupTable::single(0..devices.len(), initial);
        Ok(Self {
            devices,
            group_table,
            round: 0,
            ledger: CostLedger::new(),
            merge_ledger: CostLedger::new(),
            seeds: SeedStream::new(master_seed),
            threshold_crossings: 0,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    /// Sends every device its group's model.
    pub(crate) fn deploy_group_models(&mut self) {
        for d in &mut self.devices {
            let g = self
                .group_table
                .get(d.group_id)
                .expect("device group is live");
            d.current_model.clone_from(&g.model);
        }
    }

    /// Evaluates the listed devices on their validation split and appends to their histories.
    pub(crate) fn evaluate_devices(&mut self, ids: &[usize]) -> Result<(), FederationError> {
        let round = self.round;
        let results: Vec<_> = ids
            .par_iter()
            .map(|&i| {
                let d = &self.devices[i];
                forward_eval(&d.current_model, d.shard.validation())
            })
            .collect();
        for (&i, r) in ids.iter().zip(results) {
            let r = r.map_err(|source| FederationError::Training {
                round,
                device: i,
                source,
            })?;
            self.devices[i].loss_history.push((round, r.mean_loss));
            self.devices[i].acc_history.push((round, r.accuracy));
        }
        Ok(())
    }

    /// Structural checks run after every round: groups partition the devices, no live group is
    /// empty, every device holds one model of the shared layout, and the ledgers add up.
    pub fn check_invariants(&self) -> Result<(), FederationError> {
        let fail = |what: String| FederationError::Invariant {
            round: self.round,
            what,
        };
        let mut seen = vec![false; self.devices.len()];
        for (id, g) in self.group_table.iter() {
            if g.members.is_empty() {
                return Err(fail(format!("group {id} is empty")));
            }
            if id >= self.group_table.next_id() {
                return Err(fail(format!("group id {id} not below the id counter")));
            }
            for &m in &g.members {
                if m >= seen.len() || seen[m] {
                    return Err(fail(format!("device {m} listed twice or unknown")));
                }
                seen[m] = true;
                if self.devices[m].group_id != id {
                    return Err(fail(format!(
                        "device {m} lists group {} but is a member of {id}",
                        self.devices[m].group_id
                    )));
                }
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(fail(format!("device {orphan} belongs to no group")));
        }
        let layout = self.devices[0].current_model.layer_dims();
        for d in &self.devices {
            if d.current_model.layer_dims() != layout || !d.current_model.is_finite() {
                return Err(fail(format!(
                    "device {} holds a malformed model",
                    d.device_id
                )));
            }
        }
        if !self.ledger.is_consistent() || !self.merge_ledger.is_consistent() {
            return Err(fail("ledger totals disagree with per-round deltas".into()));
        }
        Ok(())
    }
}
