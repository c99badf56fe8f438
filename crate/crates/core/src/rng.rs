//! Named random-number substreams.
//!
//! Every stochastic component (chain, replicate, permutation batch, bootstrap)
//! draws from its own ChaCha stream derived from one user seed, so results do
//! not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent stream for `(seed, name, index)`.
pub fn substream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut stream = [0u8; 8];
    stream.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(stream));
    rng
}
