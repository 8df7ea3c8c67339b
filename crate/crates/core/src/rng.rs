//! Deterministic random streams.
//!
//! Every random quantity in the laboratory is drawn from a ChaCha8 stream
//! keyed by the master seed and a short path of integers (task tag, grid
//! index, replication, ...). Streams never depend on scheduling, so results
//! are identical for any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags separating the stream families.
pub mod tag {
    pub const BRANCHING: u64 = 0x6272_616e;
    pub const GRAPH: u64 = 0x6772_6170;
    pub const ASSIGN: u64 = 0x6173_7367;
    pub const ROOTS: u64 = 0x726f_6f74;
    pub const RUN: u64 = 0x7275_6e73;
    pub const DOMINANCE: u64 = 0x646f_6d69;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `master` and `path` into a single 64-bit key.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, p| {
        splitmix64(acc ^ splitmix64(*p))
    })
}

/// Independent stream for the task identified by `path`.
pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    let mut key = derive_seed(master, path);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        key = splitmix64(key);
        chunk.copy_from_slice(&key.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
