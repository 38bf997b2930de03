//! Named random streams derived from a single master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Deterministic generator for the sub-stream `name` of `master`.
///
/// Streams with different names are statistically independent, and a stage
/// seeded this way can be rerun on its own without replaying earlier stages.
pub fn stream(master: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(b"/");
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Stream for replication `k` of a stage, e.g. `eval.rep7`.
pub fn replication(master: u64, stage: &str, k: usize) -> StreamRng {
    stream(master, &format!("{stage}.rep{k}"))
}
