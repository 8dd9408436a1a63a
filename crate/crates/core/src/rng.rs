//! Seeded randomness with a platform-stable stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Deterministic random stream; equal seeds give bitwise-equal sequences on
/// every platform (ChaCha core, no OS entropy).
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> SeededRng {
        SeededRng { inner: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream for a sub-task, keyed by label, so the
    /// draw order of one component cannot disturb another.
    pub fn derive(&self, label: u64) -> SeededRng {
        SeededRng::new(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(label))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: &[usize], sigma: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| self.normal() * sigma).collect();
        Tensor::from_data(shape, data).expect("normal draws are finite")
    }

    /// He-style init: zero-mean Gaussian with variance 2/fan_in.
    pub fn he_tensor(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let sigma = (2.0 / fan_in.max(1) as f64).sqrt();
        self.normal_tensor(shape, sigma)
    }

    /// Fisher-Yates shuffle, draw order fixed by the stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}
