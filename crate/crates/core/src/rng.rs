//! Named random sub-streams derived from one experiment seed.
//!
//! Every consumer of randomness asks for its own stream by name (and an
//! optional index such as the epoch), so pinning or replaying one component
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub const DATA_ORDER: &str = "data_order";
pub const POLICY_SAMPLING: &str = "policy_sampling";
pub const POLICY_BATCH: &str = "policy_batch";
pub const ATTACK_INIT: &str = "attack_init";
pub const AUGMENTATION: &str = "augmentation";
pub const PARAM_INIT: &str = "param_init";
pub const EVAL_ATTACK: &str = "eval_attack";
pub const SUBSAMPLE: &str = "subsample";
pub const HARDNESS_AUG: &str = "hardness_augmentation";
pub const HARDNESS_ATTACK: &str = "hardness_attack";
pub const PG_SAMPLING: &str = "pg_sampling";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}
