//! Deterministic random streams.
//!
//! Every random draw in the library comes from ChaCha8 seeded by the run
//! seed, with an independent stream per component (and per item within a
//! component, e.g. one stream per node for spanning trees). Streams are
//! selected with ChaCha's 64-bit stream id, so adding draws in one
//! component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn label_hash(label: &str) -> u64 {
    fnv1a(label.as_bytes())
}

/// Stream for `component`, sub-indexed by `index`.
pub fn stream(seed: u64, component: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(component) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}
