use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;
use crate::error::{HuseError, Result};

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8; independent sub-streams are derived with
/// [`RngState::derive`] so that, for example, dropout draws never perturb the
/// batching order.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh stream for the same seed, numbered `stream`.
    pub fn derive(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    /// Inverted-dropout mask: entries are `0` or `1 / keep_prob`.
    pub fn bernoulli_mask(&mut self, rows: usize, cols: usize, keep_prob: f64) -> Result<Matrix> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(HuseError::invalid(format!(
                "keep_prob must lie in (0, 1], got {keep_prob}"
            )));
        }
        if keep_prob == 1.0 {
            return Ok(Matrix::from_fn(rows, cols, |_, _| 1.0));
        }
        let scale = 1.0 / keep_prob;
        Ok(Matrix::from_fn(rows, cols, |_, _| {
            if self.uniform() < keep_prob {
                scale
            } else {
                0.0
            }
        }))
    }

    /// A uniformly random permutation of `0..n`.
    pub fn shuffle_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
