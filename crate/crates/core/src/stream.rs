//! Keyed random streams.
//!
//! Each injection site gets its own ChaCha8 stream whose 256-bit key is the
//! little-endian concatenation of `(seed, trial, sample, site)`. Distinct
//! tuples are distinct keys, so no two sites ever share a stream, and the
//! draws for a site do not depend on evaluation order or thread count.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recorded in every report header.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9), key = LE u64 seed|trial|sample|site, stream 0";

#[derive(Debug, Clone)]
pub struct InjectionStream {
    rng: ChaCha8Rng,
}

pub fn derive_stream(seed: u64, trial: u64, sample: u64, site: u64) -> InjectionStream {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, trial, sample, site]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    InjectionStream {
        rng: ChaCha8Rng::from_seed(key),
    }
}

impl InjectionStream {
    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_unit(&mut self) -> f64 {
        unit_from_word(self.next_word())
    }
}

#[inline]
pub(crate) fn unit_from_word(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Maps a uniform word onto `0..n` by multiply-shift. One word per draw;
/// the bias is at most `n / 2^64`.
#[inline]
pub(crate) fn bounded_from_word(word: u64, n: u64) -> u64 {
    ((u128::from(word) * u128::from(n)) >> 64) as u64
}
