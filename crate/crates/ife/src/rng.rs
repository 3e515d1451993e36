//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from a single 64-bit seed. Sub-streams
//! (replications, multi-start perturbations, permutation resamples) derive
//! their own seeds by mixing role/index words into the master seed, so
//! parallel and serial execution draw identical numbers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of role/index words.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut state = mix(seed);
    for &w in path {
        state = mix(state ^ mix(w));
    }
    state
}

/// Counter-based generator for the given seed path.
pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
