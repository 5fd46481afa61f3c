//! Binary checkpoints.
//!
//! Little-endian throughout: the magic `FMC1`, a `u32` format version, then one model section
//! (`u32` layer count, `u32` dims, `u64` parameter count, `f64` values), then the round counter,
//! the next group id and a group count, each `u64`. Every group is stored as its id, creation round,
//! member list and a model section. A plain model file has zero groups.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::federation::{FederationState, Group, GroupId, GroupTable};
use crate::learner::ModelParams;

pub const MAGIC: &[u8; 4] = b"FMC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the end of the checkpoint")]
    TrailingBytes(usize),
    #[error("layout mismatch: {0}")]
    Layout(String),
}

/// A model plus the group table it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub round: usize,
    pub next_group_id: GroupId,
    pub groups: BTreeMap<GroupId, Group>,
}

impl Checkpoint {
    pub fn model_only(model: ModelParams) -> Self {
        Self {
            model,
            round: 0,
            next_group_id: 0,
            groups: BTreeMap::new(),
        }
    }

    /// Captures the group table and round counter of a run. `model` is the first live group's.
    pub fn from_state(state: &FederationState) -> Self {
        let groups: BTreeMap<GroupId, Group> = state
            .group_table
            .iter()
            .map(|(id, g)| (id, g.clone()))
            .collect();
        let model = groups.values().next().map_or_else(
            || state.devices[0].current_model.clone(),
            |g| g.model.clone(),
        );
        Self {
            model,
            round: state.round,
            next_group_id: state.group_table.next_id(),
            groups,
        }
    }

    pub fn group_table(&self) -> GroupTable {
        GroupTable::from_groups(self.groups.clone(), self.next_group_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_model(&mut out, &self.model);
        put_u64(&mut out, self.round as u64);
        put_u64(&mut out, self.next_group_id as u64);
        put_u64(&mut out, self.groups.len() as u64);
        for (&id, g) in &self.groups {
            put_u64(&mut out, id as u64);
            put_u64(&mut out, g.created_round as u64);
            put_u64(&mut out, g.members.len() as u64);
            for &m in &g.members {
                put_u64(&mut out, m as u64);
            }
            put_model(&mut out, &g.model);
        }
        out
    }

    /// Decodes a whole buffer. Nothing is returned unless every byte parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let model = r.model()?;
        let round = r.usize("round")?;
        let next_group_id = r.usize("next group id")?;
        let count = r.usize("group count")?;
        let mut groups = BTreeMap::new();
        for _ in 0..count {
            let id = r.usize("group id")?;
            let created_round = r.usize("group creation round")?;
            let n = r.usize("member count")?;
            let mut members = BTreeSet::new();
            for _ in 0..n {
                members.insert(r.usize("member id")?);
            }
            let gm = r.model()?;
            if !gm.same_layout(&model) {
                return Err(CheckpointError::Layout(format!(
                    "group {id} has layout {:?}, checkpoint model {:?}",
                    gm.layer_dims(),
                    model.layer_dims()
                )));
            }
            if id >= next_group_id {
                return Err(CheckpointError::Layout(format!(
                    "group id {id} not below the id counter {next_group_id}"
                )));
            }
            groups.insert(
                id,
                Group {
                    members,
                    model: gm,
                    created_round,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            model,
            round,
            next_group_id,
            groups,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_model(out: &mut Vec<u8>, m: &ModelParams) {
    out.extend_from_slice(&(m.layer_dims().len() as u32).to_le_bytes());
    for &d in m.layer_dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_u64(out, m.len() as u64);
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::Layout(format!("{what} {v} too large")))
    }

    fn model(&mut self) -> Result<ModelParams, CheckpointError> {
        let layers = self.u32("layer count")? as usize;
        // each dim is 4 bytes, so a count larger than the remaining input is truncation
        if layers > (self.bytes.len() - self.pos) / 4 {
            return Err(CheckpointError::Truncated("layer dims"));
        }
        let dims = (0..layers)
            .map(|_| self.u32("layer dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = self.usize("parameter count")?;
        if count > (self.bytes.len() - self.pos) / 8 {
            return Err(CheckpointError::Truncated("parameters"));
        }
        let values: Vec<f64> = self
            .take(count * 8, "parameters")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ModelParams::from_values(&dims, values).map_err(|e| CheckpointError::Layout(e.to_string()))
    }
}

/// Writes to a sibling temporary file first so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_model(path: &Path, model: &ModelParams) -> Result<(), CheckpointError> {
    save_checkpoint(path, &Checkpoint::model_only(model.clone()))
}

pub fn load_model(path: &Path) -> Result<ModelParams, CheckpointError> {
    load_checkpoint(path).map(|c| c.model)
}
