//! Procedural 8x8 two-class shape images.
//!
//! Class 0 is a filled 4x4 square, class 1 a 5x5 plus sign. Position and
//! intensity are jittered. Pixels live in `[-1, 1]` with the background at -1.

use crate::error::{Error, Result};
use crate::rng::{stream, NoiseStream};
use crate::tensor::Tensor;

pub const SIDE: usize = 8;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, SIDE * SIDE]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// `n` samples with classes alternating 0, 1, 0, ...
    pub fn generate(n: usize, seed: u64) -> Self {
        let mut rng = NoiseStream::new(seed, stream::DATASET);
        let mut data = Vec::with_capacity(n * SIDE * SIDE);
        let labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        for &label in &labels {
            data.extend(render(label, &mut rng));
        }
        Self {
            images: Tensor::new([n, SIDE * SIDE], data).expect("sized above"),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * SIDE * SIDE..(i + 1) * SIDE * SIDE]
    }

    /// Stacks the selected rows into a `[idx.len(), pixels]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * SIDE * SIDE);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::dim(format!("sample {i} out of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([idx.len(), SIDE * SIDE], data)?, labels))
    }

    /// Samples of one class, as a `[m, pixels]` tensor.
    pub fn class_images(&self, class: usize) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.batch(&idx).expect("indices in range").0
    }
}

fn render(label: usize, rng: &mut NoiseStream) -> Vec<f64> {
    let mut img = vec![-1.0; SIDE * SIDE];
    let value = -1.0 + 2.0 * (0.5 + 0.5 * rng.uniform());
    match label {
        0 => {
            let (r0, c0) = (rng.below(SIDE - 3), rng.below(SIDE - 3));
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    img[r * SIDE + c] = value;
                }
            }
        }
        _ => {
            let (cr, cc) = (2 + rng.below(SIDE - 4), 2 + rng.below(SIDE - 4));
            for d in 0..5 {
                img[(cr + d - 2) * SIDE + cc] = value;
                img[cr * SIDE + cc + d - 2] = value;
            }
        }
    }
    img
}
