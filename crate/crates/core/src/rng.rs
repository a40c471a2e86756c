//! Seed expansion.
//!
//! Every random stream in the crate is derived from one 64-bit root seed.
//! A child seed is `splitmix64(root ^ splitmix64(tag))`, where `tag` is a
//! stream label (hashed with FNV-1a when it is a string) optionally combined
//! with a counter. Each child seed initializes an independent ChaCha8 stream,
//! so adding a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for the stream named `label` under `root`.
pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(label)))
}

/// Seed for the `index`-th member of the stream family `label`.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(root, label) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(root: u64, label: &str) -> DetRng {
    DetRng::seed_from_u64(derive(root, label))
}

pub fn stream_indexed(root: u64, label: &str, index: u64) -> DetRng {
    DetRng::seed_from_u64(derive_indexed(root, label, index))
}
