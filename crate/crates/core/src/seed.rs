//! Seed derivation. Every random stage draws from a ChaCha stream whose seed
//! is derived from one root seed and a stage name, so stages never share a
//! stream and adding a stage does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `root` and a namespace such as `"svm"` or
/// `"convnet/layer1"`.
pub fn derive(root: u64, namespace: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(namespace.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
