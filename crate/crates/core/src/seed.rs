//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed for the substream `name`.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"/");
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream(seed, name))
}

/// Every seed an end-to-end run needs, derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub master: u64,
    /// Draws the generating process (maps, offsets, warps).
    pub process: u64,
    pub train_data: u64,
    /// Labeled split the age estimator is fitted on.
    pub estimator_data: u64,
    pub validation_data: u64,
    pub estimator: u64,
    /// Seed of the chain run itself (initialisation and training).
    pub run: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            process: substream(master, "synth/process"),
            train_data: substream(master, "synth/train"),
            estimator_data: substream(master, "synth/estimator"),
            validation_data: substream(master, "synth/validation"),
            estimator: substream(master, "estimator"),
            run: master,
        }
    }
}
