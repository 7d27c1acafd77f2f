//! Deterministic seed derivation. Every generator in the pipeline draws from
//! a stream derived from `(master seed, purpose tag, index)`, so parallel and
//! serial orchestration produce identical artifacts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a purpose tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix finalizer over the combination.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Derive a child seed from a master seed, a purpose tag, and an index.
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index))
}

/// Fresh RNG for `(master, tag)`.
pub fn rng_for(master: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, tag))
}

/// Fresh RNG for `(master, tag, index)`.
pub fn rng_for_indexed(master: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed_indexed(master, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_separate_streams() {
        assert_ne!(derive_seed(7, "data"), derive_seed(7, "pretrain"));
        assert_ne!(derive_seed_indexed(7, "env", 0), derive_seed_indexed(7, "env", 1));
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(7, "data"), derive_seed(7, "data"));
    }
}
