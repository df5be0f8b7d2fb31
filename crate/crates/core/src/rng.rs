//! Seeded random streams.
//!
//! Every random draw in a run derives from one 64-bit seed. Each consumer
//! (weight init, batch sampling, jitter, probes) gets its own ChaCha stream,
//! so adding draws to one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
pub mod stream {
    pub const GRID_INIT: u64 = 1;
    pub const MLP_INIT: u64 = 2;
    pub const RAY_BATCH: u64 = 3;
    pub const JITTER: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const PRETRAIN: u64 = 6;
    pub const MASK_PROBE: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}
