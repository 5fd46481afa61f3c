//! Wiring from a [`RunConfig`] to a finished run: data preparation, the protocol phases, per-round
//! metrics, merge-phase tracking of every group's accuracy, and the cost verification report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::{Algorithm, DatasetSource, RunConfig};
use super::metrics::MetricsRow;
use super::HarnessError;
use crate::data::{
    gen_synthetic, load_dataset, partition_archetypes, DataError, DatasetFormat, DeviceShard,
    LabeledDataset,
};
use crate::federation::{
    run_fedavg, run_fork_phase, run_merge_consolidate, FederationState, GroupId, Phase, RoundView,
};
use crate::learner::{forward_eval, init_model, ModelParams};
use crate::ledger::{
    analytic_base_transfers, analytic_comm_bound, analytic_updates, verify_against_bound,
    BoundReport, CostError, CostLedger,
};
use crate::seed::{Purpose, SeedStream};

/// Device shards plus the balanced test set held out before partitioning.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub shards: Vec<DeviceShard>,
    pub test: LabeledDataset,
    pub layer_dims: Vec<usize>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, HarnessError> {
    let seeds = SeedStream::new(cfg.master_seed);
    let source = match &cfg.dataset {
        DatasetSource::Synthetic {
            num_classes,
            feature_dim,
            per_class,
            separation,
        } => gen_synthetic(
            *num_classes,
            *feature_dim,
            *per_class,
            *separation,
            seeds.seed(Purpose::DataGen, 0, 0),
        )?,
        DatasetSource::Idx { images, labels } => load_dataset(
            images,
            &DatasetFormat::Idx {
                labels: labels.clone(),
            },
        )?,
        DatasetSource::Csv { path } => load_dataset(path, &DatasetFormat::Csv)?,
    };

    let mut test_idx = Vec::new();
    let mut pool_idx = Vec::new();
    for (class, mut idx) in source.indices_by_class().into_iter().enumerate() {
        if idx.len() <= cfg.test_per_class {
            return Err(DataError::InsufficientExamples {
                class,
                needed: cfg.test_per_class + 1,
                available: idx.len(),
            }
            .into());
        }
        idx.shuffle(&mut seeds.rng(Purpose::TestSplit, class as u64, 0));
        test_idx.extend_from_slice(&idx[..cfg.test_per_class]);
        pool_idx.extend_from_slice(&idx[cfg.test_per_class..]);
    }
    test_idx.sort_unstable();
    pool_idx.sort_unstable();
    let test = source.subset(&test_idx);
    let pool = source.subset(&pool_idx);

    let shards = partition_archetypes(
        &pool,
        &cfg.archetypes,
        cfg.devices_per_archetype,
        cfg.samples_per_device,
        cfg.validation_fraction,
        seeds.seed(Purpose::Partition, 0, 0),
    )?;
    let mut layer_dims = vec![source.feature_dim()];
    layer_dims.extend_from_slice(&cfg.hidden_layers);
    layer_dims.push(source.num_classes());
    Ok(PreparedData {
        shards,
        test,
        layer_dims,
    })
}

/// Accuracy of the shared model on one merged group's labels over the merge phase.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrack {
    pub group_id: GroupId,
    /// Union of the label sets of the group's devices' archetypes.
    pub labels: BTreeSet<usize>,
    /// Accuracy when the merge loop that folded this group in finished. The first group is folded
    /// in by the first loop, together with the second.
    pub completion: Option<f64>,
    /// `(round, accuracy)` for every merge round after completion.
    pub after_completion: Vec<(usize, f64)>,
}

impl GroupTrack {
    /// Largest absolute deviation from the completion value, if any later round exists.
    pub fn max_deviation(&self) -> Option<f64> {
        let c = self.completion?;
        self.after_completion
            .iter()
            .map(|&(_, a)| (a - c).abs())
            .reduce(f64::max)
    }

    /// Largest drop below the completion value, if any later round exists.
    pub fn max_drop(&self) -> Option<f64> {
        let c = self.completion?;
        self.after_completion
            .iter()
            .map(|&(_, a)| c - a)
            .reduce(f64::max)
    }
}

/// Costs checked against the closed-form counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CostCheck {
    pub rounds: usize,
    pub updates_measured: u64,
    pub updates_expected: u64,
    /// `Some` when the run's schedule is the one the bound assumes.
    pub transfers: Option<Result<BoundReport, CostError>>,
    pub transfers_measured: u64,
    pub merge_updates: u64,
    pub merge_transfers: u64,
}

impl CostCheck {
    pub fn updates_ok(&self) -> bool {
        self.updates_measured == self.updates_expected
    }

    pub fn passed(&self) -> bool {
        self.updates_ok() && self.transfers.as_ref().is_none_or(|r| r.is_ok())
    }
}

pub struct RunOutcome {
    pub config: RunConfig,
    pub final_model: ModelParams,
    pub rows: Vec<MetricsRow>,
    pub ledger: CostLedger,
    pub merge_ledger: CostLedger,
    pub costs: CostCheck,
    /// Group membership when the fork phase ended, by device id.
    pub fork_groups: BTreeMap<GroupId, BTreeSet<usize>>,
    pub archetype_of: Vec<usize>,
    pub merge_tracks: Vec<GroupTrack>,
    pub final_test_accuracy: f64,
    pub final_archetype_accuracy: Vec<f64>,
    pub threshold_crossings: usize,
}

impl RunOutcome {
    /// Whether every group after the fork phase holds devices of one archetype.
    pub fn fork_groups_pure(&self) -> bool {
        self.fork_groups.values().all(|m| {
            let mut arch = m.iter().map(|&d| self.archetype_of[d]);
            let first = arch.next();
            arch.all(|a| Some(a) == first)
        })
    }

    /// Mean over archetypes of the mean absolute change of their test accuracy between
    /// consecutive rows.
    pub fn archetype_oscillation(&self) -> f64 {
        archetype_oscillation(&self.rows)
    }

    pub fn report(&self) -> String {
        render_report(self)
    }
}

pub fn archetype_oscillation(rows: &[MetricsRow]) -> f64 {
    let Some(first) = rows.first() else {
        return 0.0;
    };
    let per_arch: Vec<f64> = (0..first.archetype_ids.len())
        .map(|a| {
            let deltas: Vec<f64> = rows
                .windows(2)
                .map(|w| (w[1].archetype_test_acc[a] - w[0].archetype_test_acc[a]).abs())
                .collect();
            if deltas.is_empty() {
                0.0
            } else {
                deltas.iter().sum::<f64>() / deltas.len() as f64
            }
        })
        .collect();
    per_arch.iter().sum::<f64>() / per_arch.len().max(1) as f64
}

/// Test examples restricted to a label set.
fn restrict(test: &LabeledDataset, labels: &BTreeSet<usize>) -> LabeledDataset {
    let idx: Vec<usize> = (0..test.len())
        .filter(|&i| labels.contains(&test.label(i)))
        .collect();
    test.subset(&idx)
}

fn accuracy(model: &ModelParams, data: &LabeledDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    forward_eval(model, data).map_or(0.0, |r| r.accuracy)
}

/// Read-only evaluation context shared by the observers.
struct Evaluator {
    test: LabeledDataset,
    archetype_tests: Vec<LabeledDataset>,
    archetype_labels: Vec<BTreeSet<usize>>,
}

impl Evaluator {
    fn row(&self, view: &RoundView<'_>) -> MetricsRow {
        let state = view.state;
        let evaluated: Vec<&_> = state
            .devices
            .iter()
            .filter(|d| d.loss_history.last().is_some_and(|&(r, _)| r == view.round))
            .collect();
        let device_acc: Vec<f64> = state
            .devices
            .par_iter()
            .map(|d| {
                accuracy(
                    &d.current_model,
                    &self.archetype_tests[d.shard.archetype_id()],
                )
            })
            .collect();
        let archetype_test_acc = (0..self.archetype_tests.len())
            .map(|a| {
                let accs: Vec<f64> = state
                    .devices
                    .iter()
                    .zip(&device_acc)
                    .filter(|(d, _)| d.shard.archetype_id() == a)
                    .map(|(_, &acc)| acc)
                    .collect();
                accs.iter().sum::<f64>() / accs.len().max(1) as f64
            })
            .collect();
        let global_test_acc = match (view.phase, &view.merge) {
            (Phase::Merge, Some(m)) => Some(accuracy(m.working_model, &self.test)),
            (Phase::FedAvg, _) => {
                let (_, g) = state.group_table.iter().next().expect("one group");
                Some(accuracy(&g.model, &self.test))
            }
            _ => None,
        };
        let ledger = if view.phase == Phase::Merge {
            &state.merge_ledger
        } else {
            &state.ledger
        };
        let (updates_delta, transfers_delta) = ledger.round_delta(view.round);
        MetricsRow {
            round: view.round,
            phase: view.phase,
            group_count: state.group_table.len(),
            device_ids: evaluated.iter().map(|d| d.device_id).collect(),
            group_ids: evaluated.iter().map(|d| d.group_id).collect(),
            val_loss: evaluated
                .iter()
                .map(|d| d.last_loss().unwrap_or(f64::NAN))
                .collect(),
            val_acc: evaluated
                .iter()
                .map(|d| d.last_accuracy().unwrap_or(f64::NAN))
                .collect(),
            archetype_ids: (0..self.archetype_tests.len()).collect(),
            archetype_test_acc,
            global_test_acc,
            updates_delta,
            transfers_delta,
        }
    }

    fn group_labels(&self, state: &FederationState, g: GroupId) -> BTreeSet<usize> {
        let group = state.group_table.get(g).expect("live group");
        group
            .members
            .iter()
            .flat_map(|&d| self.archetype_labels[state.devices[d].shard.archetype_id()].iter())
            .copied()
            .collect()
    }
}

/// A run in progress. Phases can be driven one at a time, which is what checkpoint and resume
/// need; [`run_experiment`] drives them all.
pub struct Experiment {
    config: RunConfig,
    state: FederationState,
    eval: Evaluator,
    rows: Vec<MetricsRow>,
    fork_groups: BTreeMap<GroupId, BTreeSet<usize>>,
    merge_tracks: Vec<GroupTrack>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let data = prepare_data(&config)?;
        let seeds = SeedStream::new(config.master_seed);
        let init = init_model(&data.layer_dims, seeds.seed(Purpose::ModelInit, 0, 0))?;
        let state = FederationState::new(data.shards, init, config.master_seed)?;
        let archetype_labels: Vec<BTreeSet<usize>> = config
            .archetypes
            .iter()
            .map(|a| a.labels().clone())
            .collect();
        let eval = Evaluator {
            archetype_tests: archetype_labels
                .iter()
                .map(|l| restrict(&data.test, l))
                .collect(),
            archetype_labels,
            test: data.test,
        };
        Ok(Self {
            config,
            state,
            eval,
            rows: Vec::new(),
            fork_groups: BTreeMap::new(),
            merge_tracks: Vec::new(),
        })
    }

    /// Rebuilds the data from the config and puts every device into its checkpointed group,
    /// holding that group's model.
    pub fn restore(config: RunConfig, ckpt: &Checkpoint) -> Result<Self, HarnessError> {
        let mut exp = Self::new(config)?;
        let layout = exp.state.devices[0].current_model.layer_dims().to_vec();
        if ckpt.model.layer_dims() != layout.as_slice() {
            return Err(CheckpointError::Layout(format!(
                "checkpoint holds {:?}, config builds {layout:?}",
                ckpt.model.layer_dims()
            ))
            .into());
        }
        let table = ckpt.group_table();
        for (id, g) in table.iter() {
            for &m in &g.members {
                let d = exp.state.devices.get_mut(m).ok_or_else(|| {
                    CheckpointError::Layout(format!("group {id} lists unknown device {m}"))
                })?;
                d.group_id = id;
                d.current_model.clone_from(&g.model);
            }
        }
        exp.state.group_table = table;
        exp.state.round = ckpt.round;
        exp.state.check_invariants()?;
        exp.fork_groups = exp.snapshot_groups();
        Ok(exp)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.state)
    }

    fn snapshot_groups(&self) -> BTreeMap<GroupId, BTreeSet<usize>> {
        self.state
            .group_table
            .iter()
            .map(|(id, g)| (id, g.members.clone()))
            .collect()
    }

    pub fn run_fedavg(&mut self) -> Result<ModelParams, HarnessError> {
        let Self {
            config,
            state,
            eval,
            rows,
            ..
        } = self;
        let mut obs = |v: &RoundView<'_>| rows.push(eval.row(v));
        let model = run_fedavg(
            state,
            config.rounds,
            config.participants_per_round,
            &config.train,
            &mut obs,
        )?;
        self.fork_groups = self.snapshot_groups();
        Ok(model)
    }

    pub fn run_fork(&mut self) -> Result<(), HarnessError> {
        let Self {
            config,
            state,
            eval,
            rows,
            ..
        } = self;
        let mut obs = |v: &RoundView<'_>| rows.push(eval.row(v));
        run_fork_phase(
            state,
            config.rounds,
            config.participants_per_round,
            &config.train,
            &config.fork,
            &mut obs,
        )?;
        self.fork_groups = self.snapshot_groups();
        Ok(())
    }

    pub fn run_merge(&mut self) -> Result<ModelParams, HarnessError> {
        let Self {
            config,
            state,
            eval,
            rows,
            merge_tracks,
            ..
        } = self;
        merge_tracks.clear();
        for id in state.group_table.ids() {
            merge_tracks.push(GroupTrack {
                group_id: id,
                labels: eval.group_labels(state, id),
                completion: None,
                after_completion: Vec::new(),
            });
        }
        let track_tests: Vec<LabeledDataset> = merge_tracks
            .iter()
            .map(|t| restrict(&eval.test, &t.labels))
            .collect();

        let mut obs = |v: &RoundView<'_>| {
            rows.push(eval.row(v));
            let m = v.merge.as_ref().expect("merge rounds carry merge context");
            for (t, test) in merge_tracks.iter_mut().zip(&track_tests) {
                if !m.merged_groups.contains(&t.group_id) {
                    continue;
                }
                let acc = accuracy(m.working_model, test);
                if t.completion.is_some() {
                    t.after_completion.push((v.round, acc));
                } else if m.group_finished {
                    t.completion = Some(acc);
                }
            }
        };
        Ok(run_merge_consolidate(
            state,
            &config.train,
            &config.merge,
            &mut obs,
        )?)
    }

    /// Runs the remaining phases of the configured algorithm and assembles the outcome.
    pub fn run(mut self) -> Result<RunOutcome, HarnessError> {
        let model = match self.config.algorithm {
            Algorithm::FedAvg => self.run_fedavg()?,
            Algorithm::FedFmc => {
                self.run_fork()?;
                self.run_merge()?
            }
        };
        Ok(self.finish(model))
    }

    /// Assembles the outcome after the phases ran, e.g. following a restore and a merge.
    pub fn finish(self, final_model: ModelParams) -> RunOutcome {
        let costs = cost_check(&self.config, &self.state);
        let final_test_accuracy = accuracy(&final_model, &self.eval.test);
        let final_archetype_accuracy = self
            .eval
            .archetype_tests
            .iter()
            .map(|t| accuracy(&final_model, t))
            .collect();
        RunOutcome {
            archetype_of: self
                .state
                .devices
                .iter()
                .map(|d| d.shard.archetype_id())
                .collect(),
            threshold_crossings: self.state.threshold_crossings,
            ledger: self.state.ledger,
            merge_ledger: self.state.merge_ledger,
            config: self.config,
            final_model,
            rows: self.rows,
            costs,
            fork_groups: self.fork_groups,
            merge_tracks: self.merge_tracks,
            final_test_accuracy,
            final_archetype_accuracy,
        }
    }
}

fn cost_check(cfg: &RunConfig, state: &FederationState) -> CostCheck {
    let (t, k, n) = (
        cfg.rounds as u64,
        cfg.participants_per_round as u64,
        cfg.num_devices() as u64,
    );
    let transfers = match cfg.algorithm {
        Algorithm::FedAvg => Some(verify_against_bound(&state.ledger, t, k, n, false)),
        Algorithm::FedFmc if cfg.fork.has_default_schedule() => Some(verify_against_bound(
            &state.ledger,
            t,
            k,
            n,
            state.threshold_crossings > 0,
        )),
        Algorithm::FedFmc => None,
    };
    CostCheck {
        rounds: cfg.rounds,
        updates_measured: state.ledger.updates(),
        updates_expected: analytic_updates(cfg.train.local_epochs as u64, k, t),
        transfers,
        transfers_measured: state.ledger.transfers(),
        merge_updates: state.merge_ledger.updates(),
        merge_transfers: state.merge_ledger.transfers(),
    }
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    Experiment::new(cfg.clone())?.run()
}

fn render_report(o: &RunOutcome) -> String {
    let cfg = &o.config;
    let mut s = String::new();
    let _ = writeln!(s, "# effective configuration");
    s.push_str(&cfg.to_config_string());
    let _ = writeln!(s, "\n# results");
    let _ = writeln!(
        s,
        "final balanced test accuracy: {:.2}%",
        o.final_test_accuracy
    );
    for (a, acc) in o.final_archetype_accuracy.iter().enumerate() {
        let _ = writeln!(s, "archetype {a} test accuracy: {acc:.2}%");
    }
    if cfg.algorithm == Algorithm::FedFmc {
        let _ = writeln!(
            s,
            "groups after forking: {} (threshold crossings: {})",
            o.fork_groups.len(),
            o.threshold_crossings
        );
        for (id, members) in &o.fork_groups {
            let arch: Vec<String> = members
                .iter()
                .map(|&d| format!("{d}(a{})", o.archetype_of[d]))
                .collect();
            let _ = writeln!(s, "  group {id}: {}", arch.join(" "));
        }
        let _ = writeln!(
            s,
            "merge rounds: {}",
            o.rows.iter().filter(|r| r.phase == Phase::Merge).count()
        );
    }

    let c = &o.costs;
    let (t, k, n) = (
        cfg.rounds as u64,
        cfg.participants_per_round as u64,
        cfg.num_devices() as u64,
    );
    let _ = writeln!(s, "\n# cost verification");
    let _ = writeln!(
        s,
        "updates: measured {} expected E*K*T = {} [{}]",
        c.updates_measured,
        c.updates_expected,
        if c.updates_ok() { "ok" } else { "MISMATCH" }
    );
    match &c.transfers {
        Some(Ok(r)) => {
            let _ = writeln!(
                s,
                "transfers: measured {} base T*(2K+N) = {} bound = {} slack {} [ok]",
                r.measured, r.base, r.bound, r.slack
            );
        }
        Some(Err(e)) => {
            let _ = writeln!(s, "transfers: {e} [FAILED]");
        }
        None => {
            let _ = writeln!(
                s,
                "transfers: measured {} base {} (bound {} not checked: non-default fork schedule)",
                c.transfers_measured,
                analytic_base_transfers(t, k, n),
                analytic_comm_bound(t, k, n)
            );
        }
    }
    if cfg.algorithm == Algorithm::FedFmc {
        let _ = writeln!(
            s,
            "merge phase: {} updates, {} transfers (no closed-form bound)",
            c.merge_updates, c.merge_transfers
        );
    }
    s
}
