//! Splitting one configured seed into independent per-component seeds.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// First output of the ChaCha8 stream `stream` keyed by `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
