//! Seeded, portable random number generation.
//!
//! Every draw goes through ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64`, which is specified bit-for-bit and independent of the
//! platform word size. Independent consumers of one run seed use separate
//! ChaCha streams (see [`streams`]).

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids carved out of a single run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const SYNTH_TRAIN: u64 = 2;
    pub const SYNTH_TEST: u64 = 3;
    pub const TEST: u64 = 100;
}

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Complete generator state, enough to resume the exact draw sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    /// Packs the state into 14 little-endian 32-bit words.
    pub fn to_words(&self) -> Vec<u32> {
        let mut words = Vec::with_capacity(14);
        for chunk in self.seed.chunks_exact(4) {
            words.push(u32::from_le_bytes(chunk.try_into().unwrap()));
        }
        words.push(self.stream as u32);
        words.push((self.stream >> 32) as u32);
        for i in 0..4 {
            words.push((self.word_pos >> (32 * i)) as u32);
        }
        words
    }

    pub fn from_words(words: &[u32]) -> Option<Self> {
        if words.len() != 14 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, w) in words[..8].iter().enumerate() {
            seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
        let stream = words[8] as u64 | (words[9] as u64) << 32;
        let word_pos = (0..4).fold(0u128, |acc, i| acc | (words[10 + i] as u128) << (32 * i));
        Some(RngState { seed, stream, word_pos })
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box–Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below((hi - lo) as u64 + 1) as usize
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}
