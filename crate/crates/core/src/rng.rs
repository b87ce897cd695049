//! Counter-based random streams.
//!
//! Every random decision in the pipeline is drawn from a ChaCha stream keyed by
//! a `(seed, stream)` pair, so any record, epoch or step can be regenerated
//! without replaying a shared generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A generator keyed by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combine two keys into one (splitmix64 finalizer over a rotated xor).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
