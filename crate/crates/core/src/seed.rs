//! Named random substreams derived from one root seed.
//!
//! Each consumer (`"split"`, `"crop"`, `"init"`, `"noise"`, ...) gets an
//! independent ChaCha stream keyed by `(root, label, index)`, so components
//! stay reproducible on their own and no generator state has to be saved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn substream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A `u64` seed for a nested substream family.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    substream(root, label, index).next_u64()
}
