//! Seeded random stream shared by every sampling site.
//!
//! The generator is ChaCha8 keyed by `ChaCha8Rng::seed_from_u64(seed)`. Derived values
//! are drawn with fixed formulas so another implementation can replay the stream:
//!
//! * `uniform()` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)` = `next_u64 % n`
//! * `sign()` = `+1` if the low bit of `next_u64` is set, else `-1`
//! * `normal()` = Box-Muller on two consecutive `uniform()` draws, first output only

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Name of the generator, echoed in reports and manifests.
pub const ALGORITHM: &str = "chacha8/seed_from_u64";

#[derive(Debug, Clone)]
pub struct SeededStream {
    inner: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream for an independent sub-task; `salt` separates sibling streams.
    pub fn derive(seed: u64, salt: u64) -> Self {
        Self::new(mix(seed, salt))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.next_u64() % n
    }

    pub fn sign(&mut self) -> f64 {
        if self.next_u64() & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// SplitMix64 output for state `seed + (salt + 1) * 0x9E3779B97F4A7C15`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
