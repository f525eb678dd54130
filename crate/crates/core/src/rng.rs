//! Deterministic seeding.
//!
//! Every random stream is a ChaCha8 generator keyed by a 64-bit seed and a
//! stream id, so sub-streams never depend on the order in which work is
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash an ordered list of integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_depend_on_every_part() {
        let a = derive_seed(&[1, 2, 3]);
        assert_ne!(a, derive_seed(&[1, 2, 4]));
        assert_ne!(a, derive_seed(&[2, 1, 3]));
        assert_eq!(a, derive_seed(&[1, 2, 3]));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let x: u64 = stream(7, 0).random();
        let y: u64 = stream(7, 1).random();
        assert_ne!(x, y);
        assert_eq!(x, stream(7, 0).random::<u64>());
    }
}
