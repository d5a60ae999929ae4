//! Small shared helpers: deterministic seed derivation and hashing.

use sha2::{Digest, Sha256};

/// Mixes a base seed with a stream of tags into a new 64-bit seed.
///
/// Used to derive independent, reproducible RNG streams for each
/// (purpose, epoch, item) combination so that resuming a run mid-way
/// replays exactly the same randomness. The mixer is SplitMix64, which is
/// a bijection per round and avalanche-complete, so distinct tag tuples
/// give uncorrelated streams.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base;
    for &tag in tags {
        state = splitmix64(state ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        state = splitmix64(state);
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}
