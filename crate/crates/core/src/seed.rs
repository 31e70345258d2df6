//! Seed fan-out.
//!
//! One master seed is split into named streams. The rule is
//! `stream(seed, name) = splitmix64(seed ^ fnv1a64(name))` and
//! `index(seed, i) = splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`,
//! so every stream is reproducible from the master seed and its path of
//! names and indices alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_RESET: &str = "reset";
pub const STREAM_DYNAMICS: &str = "dynamics";
pub const STREAM_NOISE: &str = "noise";
pub const STREAM_BETA: &str = "beta";
pub const STREAM_BOOTSTRAP: &str = "bootstrap";
pub const STREAM_ACTION: &str = "action";
pub const STREAM_MINIBATCH: &str = "minibatch";

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A node in the seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seed(pub u64);

impl Seed {
    pub fn stream(self, name: &str) -> Seed {
        Seed(splitmix64(self.0 ^ fnv1a64(name)))
    }

    pub fn index(self, i: u64) -> Seed {
        Seed(splitmix64(
            self.0
                .wrapping_add(i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        ))
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }
}
