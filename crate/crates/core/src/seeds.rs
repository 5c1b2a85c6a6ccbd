//! Deterministic seed derivation.
//!
//! Every stochastic choice in the pipeline draws from a stream derived from
//! one root seed plus a path of indices (candidate, depth, attempt, ...), so
//! results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `path` into `root`. Distinct paths give unrelated seeds.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    let mut h = mix(root.wrapping_add(GOLDEN));
    for (i, p) in path.iter().enumerate() {
        h = mix(h ^ mix(p.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2))));
    }
    h
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Stable 64-bit FNV-1a hash of a string, used to key scripted sampling on prompt text.
pub fn text_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derive_is_stable_and_path_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(7, &[1, 0]));
        let seen: HashSet<u64> = (0..1000).map(|i| derive(3, &[i])).collect();
        assert_eq!(seen.len(), 1000);
    }
}
