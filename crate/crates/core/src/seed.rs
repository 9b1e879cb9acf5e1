//! Seed plumbing. One top-level seed is split into named subseeds so that
//! data, initialization, shuffling, allocation, and probing can be varied
//! independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a named subseed, e.g. `subseed(seed, "init")`.
pub fn subseed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ mix64(fnv1a(name)))
}

/// The named subseeds used by experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub allocation: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn from_root(seed: u64) -> Self {
        Seeds {
            data: subseed(seed, "data"),
            init: subseed(seed, "init"),
            shuffle: subseed(seed, "shuffle"),
            allocation: subseed(seed, "allocation"),
            probe: subseed(seed, "probe"),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unbiased integer in `[0, n)` from a 64-bit source (Lemire's method).
pub fn bounded(next: &mut impl FnMut() -> u64, n: u64) -> u64 {
    assert!(n > 0);
    let mut m = u128::from(next()) * u128::from(n);
    let mut low = m as u64;
    if low < n {
        let threshold = n.wrapping_neg() % n;
        while low < threshold {
            m = u128::from(next()) * u128::from(n);
            low = m as u64;
        }
    }
    (m >> 64) as u64
}
