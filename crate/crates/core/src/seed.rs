//! Seed derivation.
//!
//! Child seeds are derived from a parent seed and a sequence of tags. Each
//! tag is reduced to 64 bits (integers as-is, strings by FNV-1a), folded in
//! with `state = splitmix64(state ^ tag)`, so the same path always yields
//! the same seed regardless of what else runs in the process.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Int(u64),
    Str(&'a str),
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Int(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Int(v as u64)
    }
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(v: &'a str) -> Self {
        Tag::Str(v)
    }
}

impl<'a> From<&'a String> for Tag<'a> {
    fn from(v: &'a String) -> Self {
        Tag::Str(v)
    }
}

pub fn derive(base: u64, tags: &[Tag<'_>]) -> u64 {
    tags.iter().fold(splitmix64(base), |state, t| {
        let v = match *t {
            Tag::Int(i) => i,
            Tag::Str(s) => fnv1a(s),
        };
        splitmix64(state ^ v)
    })
}

/// `derive!(base, "tag", 3usize, &name)` -> `u64`.
#[macro_export]
macro_rules! derive_seed {
    ($base:expr $(, $tag:expr)* $(,)?) => {
        $crate::seed::derive($base, &[$($crate::seed::Tag::from($tag)),*])
    };
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
