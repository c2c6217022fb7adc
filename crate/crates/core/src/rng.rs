//! Seed plumbing. Every random stream is a ChaCha8 generator seeded from a
//! master seed and a purpose label, so streams stay independent when one
//! consumer draws more or fewer numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive(seed: u64, purpose: &str) -> u64 {
    mix(seed ^ hash_bytes(purpose.as_bytes()))
}

pub fn derive_indexed(seed: u64, purpose: &str, index: u64) -> u64 {
    mix(derive(seed, purpose) ^ mix(index))
}

pub fn stream(seed: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, purpose))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
