//! Named sub-seeds derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Deterministic mix of several words into one seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5EED_u64, |acc, &w| splitmix(acc ^ splitmix(w)))
}

/// Seed for the stream of randomness called `name` under `master`.
pub fn sub_seed(master: u64, name: &str) -> u64 {
    mix(&[master, fnv1a(name)])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_ne!(sub_seed(1, "data"), sub_seed(1, "init"));
        assert_ne!(sub_seed(1, "data"), sub_seed(2, "data"));
        assert_eq!(sub_seed(7, "stream"), sub_seed(7, "stream"));
    }
}
