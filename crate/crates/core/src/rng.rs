//! Seeded randomness.
//!
//! Every random draw goes through ChaCha8 seeded with a 64-bit value, which
//! produces the same stream on every platform. Child seeds are derived from
//! a master seed and an index with the SplitMix64 finalizer:
//! `child = mix(master ^ mix(index + 0x9E3779B97F4A7C15))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name recorded in configs and reports for the generator in use.
pub const RNG_NAME: &str = "chacha8";

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for stream `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

/// Child seed keyed by several indices (e.g. epoch, sequence, frame).
pub fn derive_seed_path(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |s, &i| derive_seed(s, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
        assert_ne!(derive_seed_path(7, &[1, 2]), derive_seed_path(7, &[2, 1]));
    }
}
