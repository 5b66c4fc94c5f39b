//! Seed derivation. Every stochastic component takes its own RNG derived
//! from (master seed, stream label) so that adding or reordering one
//! component never perturbs the draws of another.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a master seed and a label.
pub fn derive_rng(master_seed: u64, stream: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(seed)
}
