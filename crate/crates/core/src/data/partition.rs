//! Label-skew partitioning.
//!
//! A device of an archetype with bias `b` draws `floor(b * samples)` examples whose class is
//! picked uniformly from the archetype's label set, and the remainder with the class picked
//! uniformly from all classes. Draws never repeat an example within one device; different devices
//! may share source examples.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{DataError, LabeledDataset};
use crate::seed::{derive_seed, rng_from_seed, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct ArchetypeSpec {
    label_set: BTreeSet<usize>,
    bias: f64,
}

impl ArchetypeSpec {
    pub fn new(labels: impl IntoIterator<Item = usize>, bias: f64) -> Result<Self, DataError> {
        let label_set: BTreeSet<usize> = labels.into_iter().collect();
        if label_set.is_empty() {
            return Err(DataError::InvalidArchetype("empty label set".into()));
        }
        if !(0.0..=1.0).contains(&bias) {
            return Err(DataError::InvalidArchetype(format!(
                "bias {bias} outside [0, 1]"
            )));
        }
        Ok(Self { label_set, bias })
    }

    pub fn labels(&self) -> &BTreeSet<usize> {
        &self.label_set
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn contains(&self, label: usize) -> bool {
        self.label_set.contains(&label)
    }
}

/// One simulated device's data. `archetype_id` is ground truth for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceShard {
    train: LabeledDataset,
    validation: LabeledDataset,
    archetype_id: usize,
    train_indices: Vec<usize>,
    validation_indices: Vec<usize>,
}

impl DeviceShard {
    /// Builds a shard from explicit splits, without source-index bookkeeping.
    pub fn new(
        train: LabeledDataset,
        validation: LabeledDataset,
        archetype_id: usize,
    ) -> Result<Self, DataError> {
        if train.is_empty() || validation.is_empty() {
            return Err(DataError::InvalidArgument(
                "train and validation splits must be non-empty".into(),
            ));
        }
        Ok(Self {
            train,
            validation,
            archetype_id,
            train_indices: Vec::new(),
            validation_indices: Vec::new(),
        })
    }

    pub fn train(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn validation(&self) -> &LabeledDataset {
        &self.validation
    }

    pub fn archetype_id(&self) -> usize {
        self.archetype_id
    }

    /// Sample count `n_k` used as the averaging weight.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }

    /// Source-dataset row indices of the train split.
    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.validation_indices
    }
}

pub fn partition_archetypes(
    dataset: &LabeledDataset,
    specs: &[ArchetypeSpec],
    devices_per_archetype: usize,
    samples_per_device: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<Vec<DeviceShard>, DataError> {
    if specs.is_empty() {
        return Err(DataError::InvalidArgument("no archetypes given".into()));
    }
    if devices_per_archetype == 0 {
        return Err(DataError::InvalidArgument(
            "devices_per_archetype must be >= 1".into(),
        ));
    }
    if samples_per_device < 2 {
        return Err(DataError::InvalidArgument(
            "samples_per_device must be >= 2 to leave a validation split".into(),
        ));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "validation_fraction {validation_fraction} outside (0, 1)"
        )));
    }

    let by_class = dataset.indices_by_class();
    let num_classes = dataset.num_classes();
    for (a, spec) in specs.iter().enumerate() {
        for &label in spec.labels() {
            if label >= num_classes || by_class[label].is_empty() {
                return Err(DataError::InvalidArchetype(format!(
                    "archetype {a} references label {label}, absent from the dataset"
                )));
            }
        }
    }

    let n_val = ((validation_fraction * samples_per_device as f64).round() as usize)
        .clamp(1, samples_per_device - 1);

    let mut shards = Vec::with_capacity(specs.len() * devices_per_archetype);
    for (archetype_id, spec) in specs.iter().enumerate() {
        let skewed = ((spec.bias() * samples_per_device as f64) + 1e-9).floor() as usize;
        let skewed = skewed.min(samples_per_device);
        let label_set: Vec<usize> = spec.labels().iter().copied().collect();
        for _ in 0..devices_per_archetype {
            let device = shards.len() as u64;
            let mut rng = rng_from_seed(derive_seed(seed, Purpose::Partition, device, 0));

            let mut counts = vec![0usize; num_classes];
            for _ in 0..skewed {
                counts[label_set[rng.random_range(0..label_set.len())]] += 1;
            }
            for _ in skewed..samples_per_device {
                counts[rng.random_range(0..num_classes)] += 1;
            }

            let mut picked = Vec::with_capacity(samples_per_device);
            for (class, &count) in counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let pool = &by_class[class];
                if count > pool.len() {
                    return Err(DataError::InsufficientExamples {
                        class,
                        needed: count,
                        available: pool.len(),
                    });
                }
                picked.extend(
                    index::sample(&mut rng, pool.len(), count)
                        .iter()
                        .map(|i| pool[i]),
                );
            }
            picked.shuffle(&mut rng);

            let (val_idx, train_idx) = picked.split_at(n_val);
            shards.push(DeviceShard {
                train: dataset.subset(train_idx),
                validation: dataset.subset(val_idx),
                archetype_id,
                train_indices: train_idx.to_vec(),
                validation_indices: val_idx.to_vec(),
            });
        }
    }
    Ok(shards)
}
