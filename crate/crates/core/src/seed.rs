use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent child seed for sub-task `stream` of a run seeded with `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Two-level variant, e.g. `(epoch, sample)`.
pub fn derive_seed2(base: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(base, a), b)
}
