//! Named random substreams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream (`"data"`,
//! `"sampling"`, `"init"`, `"bootstrap"`, ...), so varying one component never
//! shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the stream name, used to separate substreams.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream `name` under `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    mix64(root ^ mix64(fnv1a(name)))
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(substream_seed(root, name))
}

/// Substream further keyed by an index (epoch, shopper, worker, ...).
pub fn indexed_substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix64(
        substream_seed(root, name) ^ mix64(index.wrapping_add(1)),
    ))
}

/// Stable 64-bit hash of a string under a seed; used for split assignment.
pub fn keyed_hash(seed: u64, key: &str) -> u64 {
    mix64(fnv1a(key) ^ mix64(seed))
}
