//! Modern Hopfield energy and its one-step retrieval update.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax_rows, Tensor};

/// Stored patterns as the columns of a `(d, N)` matrix plus a state pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct HopfieldInstance {
    patterns: Tensor,
    pub state: Vec<f64>,
    beta: f64,
}

impl HopfieldInstance {
    pub fn new(patterns: Tensor, state: Vec<f64>, beta: f64) -> Result<Self> {
        let s = patterns.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::dim(format!("patterns must be (d, N) with N > 0, got {s:?}")));
        }
        if state.len() != s[0] {
            return Err(Error::dim(format!(
                "state has length {}, patterns have dimension {}",
                state.len(),
                s[0]
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("inverse temperature must be positive, got {beta}")));
        }
        Ok(Self {
            patterns,
            state,
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.patterns.shape()[0]
    }

    pub fn count(&self) -> usize {
        self.patterns.shape()[1]
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn patterns(&self) -> &Tensor {
        &self.patterns
    }

    /// Largest pattern norm.
    pub fn max_norm(&self) -> f64 {
        let (d, n) = (self.dim(), self.count());
        (0..n)
            .map(|i| {
                (0..d)
                    .map(|r| self.patterns.data()[r * n + i].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// `X^T state`.
    fn similarities(&self) -> Vec<f64> {
        let (d, n) = (self.dim(), self.count());
        (0..n)
            .map(|i| (0..d).map(|r| self.patterns.data()[r * n + i] * self.state[r]).sum())
            .collect()
    }
}

/// `-lse(beta, X^T z) + z.z / 2 + ln(N) / beta + M^2 / 2`.
pub fn hopfield_energy(inst: &HopfieldInstance) -> f64 {
    let beta = inst.beta;
    let scaled: Vec<f64> = inst.similarities().iter().map(|s| beta * s).collect();
    let lse = log_sum_exp(&scaled) / beta;
    let half_sq = 0.5 * inst.state.iter().map(|z| z * z).sum::<f64>();
    let m = inst.max_norm();
    -lse + half_sq + (inst.count() as f64).ln() / beta + 0.5 * m * m
}

/// `X softmax(beta X^T z)`.
pub fn hopfield_update(inst: &HopfieldInstance) -> Vec<f64> {
    let n = inst.count();
    let logits: Vec<f64> = inst.similarities().iter().map(|s| inst.beta * s).collect();
    let p = softmax_rows(&Tensor::new([1, n], logits).expect("length matches"));
    (0..inst.dim())
        .map(|r| {
            (0..n)
                .map(|i| inst.patterns.data()[r * n + i] * p.data()[i])
                .sum()
        })
        .collect()
}
