//! Seeded, resumable randomness streams.
//!
//! Every random draw in the engine flows through an [`RngStream`]: a ChaCha20
//! generator whose seed and word position can be captured and restored, so a
//! checkpoint pins the exact continuation of training randomness.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// A deterministic random stream with save/restore support.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha20Rng,
}

/// Serializable position of a stream: the seed plus the ChaCha word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngStream {
    /// Fresh stream at position zero.
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Captures the current position for checkpointing.
    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Reconstructs a stream at a previously captured position.
    pub fn restore(state: StreamState) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(state.seed);
        rng.set_word_pos(state.word_pos);
        RngStream {
            seed: state.seed,
            rng,
        }
    }

    /// One standard-uniform draw in [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// One uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// One Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// One uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// One N(0, stddev²) draw (stddev must be positive; use
    /// [`gaussian_sample`] for the stddev = 0 edge case).
    pub fn normal(&mut self, stddev: f64) -> f64 {
        let dist = Normal::new(0.0, stddev).expect("positive finite stddev");
        dist.sample(&mut self.rng)
    }

    /// Fills a buffer with i.i.d. N(0, stddev²) draws in index order.
    pub fn fill_normal(&mut self, out: &mut [f64], stddev: f64) -> Result<()> {
        if !(stddev >= 0.0) || !stddev.is_finite() {
            return Err(Error::Param(format!(
                "noise stddev must be finite and ≥ 0, got {stddev}"
            )));
        }
        if stddev == 0.0 {
            out.fill(0.0);
            return Ok(());
        }
        let dist = Normal::new(0.0, stddev).expect("validated above");
        for v in out.iter_mut() {
            *v = dist.sample(&mut self.rng);
        }
        Ok(())
    }
}

/// Matrix of i.i.d. N(0, stddev²) entries, deterministic for a given stream
/// state. `stddev = 0` returns zeros without consuming the stream.
pub fn gaussian_sample(
    rows: usize,
    cols: usize,
    stddev: f64,
    stream: &mut RngStream,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(rows, cols);
    stream.fill_normal(out.data_mut(), stddev)?;
    Ok(out)
}
