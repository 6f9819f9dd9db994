//! Keyed random streams.
//!
//! Every random draw in a run comes from a ChaCha stream whose key is derived
//! from the run seed plus a tuple of identifiers (task, layer, step, ...).
//! Streams never depend on how many draws happened elsewhere, which keeps
//! runs reproducible across resumes and reorderings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KeyedRng = ChaCha8Rng;

/// Domain tags so different consumers never share a stream.
pub mod domain {
    pub const ADAPTER_INIT: u64 = 1;
    pub const GUMBEL: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const CONCEPT: u64 = 5;
    pub const BACKBONE: u64 = 6;
    pub const TOKEN_INIT: u64 = 7;
    pub const EMBEDDER: u64 = 8;
    pub const PERMUTATION: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a key tuple into one 64-bit value.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn keyed(seed: u64, parts: &[u64]) -> KeyedRng {
    let mut key = [0u8; 32];
    let mut h = mix(seed, parts);
    for chunk in key.chunks_mut(8) {
        h = splitmix(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
