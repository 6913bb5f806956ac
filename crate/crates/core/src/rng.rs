//! Named, independent random streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the tag, folded into the seed with a splitmix64 finalizer.
fn derive(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for the purpose named by `tag`.
pub fn stream(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, tag))
}

/// Deterministic generator for item `index` of the purpose named by `tag`.
pub fn indexed_stream(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(derive(seed, tag), &index.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn tags_separate_streams() {
        let a = stream(7, "data").next_u64();
        let b = stream(7, "model").next_u64();
        assert_ne!(a, b);
        assert_eq!(a, stream(7, "data").next_u64());
    }
}
