//! Deterministic named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Derives an independent generator for `name` from `root`.
///
/// The mixing is a fixed FNV-1a hash of the name followed by a splitmix64
/// finalizer, so streams are stable across platforms and releases.
pub fn substream(root: u64, name: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Rng::seed_from_u64(splitmix64(root ^ splitmix64(h)))
}

/// Derives the `index`-th child of a named substream.
pub fn indexed_substream(root: u64, name: &str, index: u64) -> Rng {
    substream(splitmix64(root.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))), name)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
