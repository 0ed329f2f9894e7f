//! Counter-based random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! run seed, so adding a guidance branch never shifts the noise another
//! branch sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Stream identifiers. Values are part of the reproducibility contract.
pub mod stream {
    pub const INITIAL_NOISE: u64 = 0;
    pub const LAYER_DROP: u64 = 1;
    pub const CONDITION_NOISE: u64 = 2;
    pub const TRAIN_BATCH: u64 = 3;
    pub const TRAIN_NOISE: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const INIT: u64 = 6;
    pub const HELD_OUT: u64 = 7;
}

#[derive(Clone, Debug)]
pub struct NoiseStream(ChaCha8Rng);

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }
}
