//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed plus a string tag (`"data.train"`, `"client.2"`, ...). Streams are
//! independent of each other and of execution order, which is what makes the
//! parallel and serial schedules bit-identical: a client draws the same
//! numbers whether it runs on thread 0 or thread 3.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, 64 bit. Stable across platforms, good enough for tag dispersion.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha stream unique to `(seed, tag)`.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let th = fnv1a(tag.as_bytes());
    // Spread seed and tag hash over the 256-bit key so that neither alone
    // fully determines the stream.
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&th.to_le_bytes());
    key[16..24].copy_from_slice(&(seed ^ th.rotate_left(31)).to_le_bytes());
    let tail = fnv1a(&key[0..24]);
    key[24..32].copy_from_slice(&tail.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Convenience for indexed families of streams (`client.0`, `client.1`, ...).
pub fn indexed_stream(seed: u64, family: &str, index: usize) -> ChaCha8Rng {
    stream(seed, &format!("{family}.{index}"))
}
