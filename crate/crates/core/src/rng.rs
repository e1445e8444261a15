//! Seed derivation.
//!
//! Every random stream in the lab comes from a `ChaCha8Rng` whose seed is
//! derived from a run seed plus a path of indices (prompt, rollout, step...).
//! Derivation is a splitmix64 chain, so child streams are independent of the
//! order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and an index path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i)))
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(seed: u64, path: &[u64]) -> LabRng {
    rng_from_seed(derive_seed(seed, path))
}
