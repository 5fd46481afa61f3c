//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by `(master, purpose, a, b)` rather than drawn from a
//! shared generator, so the order in which devices are trained or evaluated never changes the
//! numbers they see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Part of the derivation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    ModelInit,
    Partition,
    DataGen,
    TestSplit,
    Sample,
    Train,
    MergeSample,
    MergeTrain,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::ModelInit => 1,
            Purpose::Partition => 2,
            Purpose::DataGen => 3,
            Purpose::TestSplit => 4,
            Purpose::Sample => 5,
            Purpose::Train => 6,
            Purpose::MergeSample => 7,
            Purpose::MergeTrain => 8,
        }
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key components into a single 64-bit seed.
pub fn derive_seed(master: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose.tag());
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

/// A generator for an arbitrary 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The master seed of a run plus helpers for the streams derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, purpose: Purpose, a: u64, b: u64) -> u64 {
        derive_seed(self.master, purpose, a, b)
    }

    pub fn rng(&self, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
        rng_from_seed(self.seed(purpose, a, b))
    }
}
