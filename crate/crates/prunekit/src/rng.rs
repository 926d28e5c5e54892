//! Seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded through
//! this module. A run is controlled by one root seed; each pipeline stage
//! XORs its stage index into that seed, and per-epoch streams XOR the epoch
//! counter shifted above the stage bits. Stage indices live in the low byte,
//! epoch salts in bits 8 and up, so streams never collide.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stage indices, XOR'd into the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Dataset = 1,
    Split = 2,
    Init = 3,
    Pretrain = 4,
    Optimize = 5,
    TrialEpoch = 6,
    Sfp = 7,
    Finetune = 8,
}

/// Seed for one pipeline stage.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    root ^ stage as u64
}

/// Seed for one epoch within a stage (epoch salt sits above the stage byte).
pub fn epoch_seed(stage_seed: u64, epoch: usize) -> u64 {
    stage_seed ^ ((epoch as u64 + 1) << 8)
}

/// Deterministic generator for a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    // seed_from_u64 runs SplitMix64 internally, so nearby seeds still give
    // decorrelated streams.
    ChaCha8Rng::seed_from_u64(seed)
}
