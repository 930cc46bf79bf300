//! Seeded, platform-independent randomness with labeled substreams.
//!
//! Streams are ChaCha8 keystreams keyed by SHA-256 of the parent key and a
//! label, so `(seed, label)` always names the same sequence and two distinct
//! labels can never alias. ChaCha's output is specified bit-exactly, which
//! makes every experiment in the crate replayable from its config alone.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

use crate::math::Matrix;

const ROOT_DOMAIN: &[u8] = b"lora-compose.rng.v1";

#[derive(Debug, Clone)]
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a 64-bit seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(ROOT_DOMAIN);
        hasher.update(seed.to_le_bytes());
        Self::from_key(hasher.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        RngStream {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// Derives an independent child stream. Distinct labels map to distinct
    /// SHA-256 keys and therefore to non-overlapping keystreams. Derivation
    /// uses the parent's *key*, not its position, so the order in which
    /// substreams are created (or whether the parent was consumed) is
    /// irrelevant.
    pub fn substream(&self, label: &str) -> RngStream {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update([0u8]);
        hasher.update(label.as_bytes());
        Self::from_key(hasher.finalize().into())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` using the top 53 bits of one `u64`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform: draws `u1 in (0, 1]`
    /// and `u2 in [0, 1)` and returns `sqrt(-2 ln u1) * cos(2 pi u2)`.
    /// Two u64 draws per sample, no cached spare.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: keeps ln away from -inf
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }

    /// Uniform integer in `[0, n)` by 128-bit widening multiply.
    /// The bias is below 2^-40 for every n used in this crate.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n >= 1);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates permutation of `0..n` (descending swap order).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// A `rows x cols` matrix with i.i.d. `Normal(0, sigma^2)` entries, filled in
/// row-major order. `sigma = 0` yields an exact zero matrix.
pub fn gaussian(rng: &mut RngStream, rows: usize, cols: usize, sigma: f64) -> Matrix {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    Matrix::from_fn(rows, cols, |_, _| rng.normal(sigma))
}
