//! Reproducible random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, label)`. Streams
//! are ChaCha8 instances keyed by the global seed with the label hashed into
//! the stream id, so two streams never share output and no stream depends on
//! how many values another one has drawn.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Stream {
    inner: ChaCha8Rng,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self::with_id(seed, fnv1a(label.as_bytes()))
    }

    /// Stream for the `index`-th item of a labelled family (episode `i`,
    /// grid cell `j`, ...).
    pub fn indexed(seed: u64, label: &str, index: u64) -> Self {
        let mut key = [0u8; 8];
        key.copy_from_slice(&index.to_le_bytes());
        let id = fnv1a(label.as_bytes()) ^ fnv1a(&key).rotate_left(17);
        Self::with_id(seed, id)
    }

    fn with_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
