//! Shared fixtures for the benchmarks.

use emag_core::model::{ModelConfig, Prediction, ToyModelParams};
use emag_core::rng::NoiseStream;
use emag_core::tensor::softmax_rows;
use emag_core::Tensor;

pub fn model() -> ToyModelParams {
    ToyModelParams::init(ModelConfig::new(Prediction::Eps), 0).expect("default config is valid")
}

pub fn attention(batch: usize, seed: u64) -> Tensor {
    softmax_rows(&NoiseStream::new(seed, 0).normal_tensor([batch, 2, 16, 16]))
}

pub fn points(n: usize, seed: u64) -> Tensor {
    NoiseStream::new(seed, 0).normal_tensor([n, 64])
}
