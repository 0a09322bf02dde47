//! Seeded, replayable random number generation.
//!
//! Every stochastic operation in the crate takes an explicit `&mut Rng`.
//! The generator is ChaCha8 in counter mode, so its full state is the seed,
//! the stream id and the word position; [`RngState`] captures exactly that
//! and can be stored in a checkpoint to resume a run bit-for-bit.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lower/upper margin for the uniform draw feeding the Gumbel transform.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// An independent generator sharing this one's seed on another stream.
    pub fn with_stream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(self.0.get_seed());
        inner.set_stream(stream);
        Rng(inner)
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng(inner)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.0.get_seed(),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos(),
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Standard Gumbel draw, `-ln(-ln u)` with `u ~ U(eps, 1 - eps)`.
    pub fn gumbel(&mut self) -> f64 {
        let u = GUMBEL_EPS + (1.0 - 2.0 * GUMBEL_EPS) * self.uniform();
        -(-u.ln()).ln()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}

impl RngState {
    /// Compact text form `seedhex:stream:wordpos`, used in checkpoint blobs.
    pub fn to_text(&self) -> String {
        let hex: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}:{}:{}", self.stream, self.word_pos)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed rng state `{text}`"));
        let mut parts = text.trim().split(':');
        let hex = parts.next().ok_or_else(bad)?;
        let stream = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let word_pos = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if parts.next().is_some() || hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(RngState { seed, stream, word_pos })
    }
}
