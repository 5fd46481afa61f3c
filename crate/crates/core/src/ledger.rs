//! Update and transfer accounting.
//!
//! Units: one *update* is one device training one local epoch; one *transfer* is one whole-model
//! weight movement between the server and a device, in either direction. Per fork/FedAvg round the
//! base cost is `2K` (the sampled devices download and upload) plus `N` (every device receives its
//! group's averaged model). Each foreign group model a device tries during a fork decision adds one
//! transfer, as does seeding a newly forked group.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundCost {
    pub round: usize,
    pub updates_delta: u64,
    pub transfers_delta: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    updates: u64,
    transfers: u64,
    per_round: Vec<RoundCost>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("ledger rounds must be non-decreasing: got round {got} after {last}")]
    RoundOrder { last: usize, got: usize },
    #[error(
        "measured transfers {measured} exceed the analytic bound {bound}; first exceeded in round {first_round}"
    )]
    BoundViolation {
        measured: u64,
        bound: u64,
        first_round: usize,
    },
    #[error("no-fork run moved {measured} models, expected exactly {expected}")]
    BaseMismatch { measured: u64, expected: u64 },
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn transfers(&self) -> u64 {
        self.transfers
    }

    pub fn per_round(&self) -> &[RoundCost] {
        &self.per_round
    }

    /// Adds costs to `round`. Repeated calls for the current round accumulate into one entry.
    pub fn record(&mut self, round: usize, updates: u64, transfers: u64) -> Result<(), CostError> {
        match self.per_round.last_mut() {
            Some(last) if last.round == round => {
                last.updates_delta += updates;
                last.transfers_delta += transfers;
            }
            Some(last) if last.round > round => {
                return Err(CostError::RoundOrder {
                    last: last.round,
                    got: round,
                })
            }
            _ => self.per_round.push(RoundCost {
                round,
                updates_delta: updates,
                transfers_delta: transfers,
            }),
        }
        self.updates += updates;
        self.transfers += transfers;
        Ok(())
    }

    /// Deltas recorded for `round`, zero if nothing was recorded.
    pub fn round_delta(&self, round: usize) -> (u64, u64) {
        self.per_round
            .iter()
            .find(|r| r.round == round)
            .map_or((0, 0), |r| (r.updates_delta, r.transfers_delta))
    }

    /// Totals equal the sum of the per-round deltas and rounds are strictly increasing.
    pub fn is_consistent(&self) -> bool {
        let u: u64 = self.per_round.iter().map(|r| r.updates_delta).sum();
        let t: u64 = self.per_round.iter().map(|r| r.transfers_delta).sum();
        u == self.updates
            && t == self.transfers
            && self.per_round.windows(2).all(|w| w[0].round < w[1].round)
    }
}

/// `E * K * T`.
pub fn analytic_updates(local_epochs: u64, participants: u64, rounds: u64) -> u64 {
    local_epochs * participants * rounds
}

/// The `T * (2K + N)` base term shared by FedAvg and the fork phase.
pub fn analytic_base_transfers(rounds: u64, participants: u64, devices: u64) -> u64 {
    rounds * (2 * participants + devices)
}

/// Worst-case transfer count of the fork phase:
/// `T * (2K + N) + sum_{t=1}^{floor(T/4)} N * (t - 1)`.
pub fn analytic_comm_bound(rounds: u64, participants: u64, devices: u64) -> u64 {
    let extra: u64 = (1..=rounds / 4).map(|t| devices * (t - 1)).sum();
    analytic_base_transfers(rounds, participants, devices) + extra
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundReport {
    pub measured: u64,
    pub base: u64,
    pub bound: u64,
    pub slack: u64,
}

impl BoundReport {
    pub fn matches_base(&self) -> bool {
        self.measured == self.base
    }
}

/// Checks a finished fork phase against the analytic bound. When `crossed_threshold` is false
/// (no device ever left its group's loss band) the measured count must equal the base term.
pub fn verify_against_bound(
    ledger: &CostLedger,
    rounds: u64,
    participants: u64,
    devices: u64,
    crossed_threshold: bool,
) -> Result<BoundReport, CostError> {
    let measured = ledger.transfers();
    let bound = analytic_comm_bound(rounds, participants, devices);
    let base = analytic_base_transfers(rounds, participants, devices);
    if measured > bound {
        let mut running = 0;
        let first_round = ledger
            .per_round()
            .iter()
            .find(|r| {
                running += r.transfers_delta;
                running > bound
            })
            .map_or(0, |r| r.round);
        return Err(CostError::BoundViolation {
            measured,
            bound,
            first_round,
        });
    }
    if !crossed_threshold && measured != base {
        return Err(CostError::BaseMismatch {
            measured,
            expected: base,
        });
    }
    Ok(BoundReport {
        measured,
        base,
        bound,
        slack: bound - measured,
    })
}
