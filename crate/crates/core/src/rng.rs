//! Named, seed-derived random streams.
//!
//! Every consumer of randomness (`datagen`, `init`, `shuffle`, `augment`, ...)
//! draws from its own ChaCha stream keyed by `(seed, name, index...)`, so
//! changing how much one consumer draws never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, name: &str, index: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for i in index {
        h.update(i.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
