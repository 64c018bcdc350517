//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha20 stream. Replication
//! streams are derived from `(base_seed, size, rep)` with a SplitMix64
//! finalizer, so adding a sample size to a sweep never perturbs the draws of
//! the other cells.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Identifier of the generator and the substream derivation, recorded in
/// reports so results can be matched to the algorithm that produced them.
pub const RNG_ID: &str = "chacha20 (rand_chacha 0.9) / splitmix64 substreams v1";

pub type Rng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the replication stream for cell `(size, rep)`.
pub fn substream_seed(base_seed: u64, size: u64, rep: u64) -> u64 {
    mix64(mix64(mix64(base_seed) ^ size) ^ rep.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}
