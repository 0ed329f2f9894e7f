//! Exponential moving averages of attention maps across sampler steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decay used when none is configured.
pub const DEFAULT_BETA: f64 = 0.988;

/// Which guidance branch an EMA buffer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Conditional,
    Unconditional,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Conditional => "conditional",
            Branch::Unconditional => "unconditional",
        }
    }
}

/// `2^(-1/H)`: the decay whose gap to a constant input halves every `H` steps.
pub fn beta_from_halflife(halflife: f64) -> Result<f64> {
    if !(halflife > 0.0) || !halflife.is_finite() {
        return Err(Error::Domain(format!("halflife must be positive, got {halflife}")));
    }
    Ok((-std::f64::consts::LN_2 / halflife).exp())
}

/// `beta * prev + (1 - beta) * current`, or `current` when there is no history.
pub fn ema_blend(prev: Option<&Tensor>, current: &Tensor, beta: f64) -> Result<Tensor> {
    match prev {
        None => Ok(current.clone()),
        Some(e) => e.zip_map(current, |e, a| beta * e + (1.0 - beta) * a),
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Buffer {
    value: Tensor,
    updates: usize,
}

/// Per-trajectory EMA buffers, one per `(layer, branch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    beta: f64,
    buffers: BTreeMap<(usize, Branch), Buffer>,
}

impl EmaState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Domain(format!("EMA decay must lie in (0, 1), got {beta}")));
        }
        Ok(Self {
            beta,
            buffers: BTreeMap::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Folds `attn` into the buffer for `(layer, branch)` and returns the new
    /// average. The first call initialises the buffer to `attn`.
    pub fn update(&mut self, layer: usize, branch: Branch, attn: &Tensor) -> Result<&Tensor> {
        let beta = self.beta;
        let buf = match self.buffers.entry((layer, branch)) {
            std::collections::btree_map::Entry::Vacant(v) => v.insert(Buffer {
                value: attn.clone(),
                updates: 1,
            }),
            std::collections::btree_map::Entry::Occupied(o) => {
                let buf = o.into_mut();
                if buf.value.shape() != attn.shape() {
                    return Err(Error::EmaShapeChanged {
                        layer,
                        expected: buf.value.shape().to_vec(),
                        found: attn.shape().to_vec(),
                    });
                }
                buf.value = ema_blend(Some(&buf.value), attn, beta)?;
                buf.updates += 1;
                buf
            }
        };
        Ok(&buf.value)
    }

    pub fn get(&self, layer: usize, branch: Branch) -> Option<&Tensor> {
        self.buffers.get(&(layer, branch)).map(|b| &b.value)
    }

    /// Number of updates folded into the buffer so far.
    pub fn step_count(&self, layer: usize, branch: Branch) -> usize {
        self.buffers.get(&(layer, branch)).map_or(0, |b| b.updates)
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;
    use crate::tensor::softmax_rows;

    fn random_attention(rng: &mut NoiseStream) -> Tensor {
        softmax_rows(&rng.normal_tensor([1, 2, 3, 3]))
    }

    #[test]
    fn first_call_initialises() {
        let mut s = EmaState::new(0.9).unwrap();
        let a = random_attention(&mut NoiseStream::new(0, 0));
        assert!(s.update(1, Branch::Conditional, &a).unwrap().bit_eq(&a));
        assert_eq!(s.step_count(1, Branch::Conditional), 1);
    }

    #[test]
    fn scalar_update() {
        let mut s = EmaState::new(DEFAULT_BETA).unwrap();
        s.update(0, Branch::Conditional, &Tensor::scalar(1.0)).unwrap();
        let e = s.update(0, Branch::Conditional, &Tensor::scalar(0.0)).unwrap();
        assert!((e.data()[0] - 0.988).abs() < 1e-15);
    }

    #[test]
    fn matches_closed_form_geometric_sum() {
        let beta = DEFAULT_BETA;
        let mut rng = NoiseStream::new(11, 0);
        let seq: Vec<Tensor> = (0..100).map(|_| random_attention(&mut rng)).collect();
        let mut s = EmaState::new(beta).unwrap();
        let mut last = Tensor::zeros([0]);
        for a in &seq {
            last = s.update(2, Branch::Unconditional, a).unwrap().clone();
        }
        // E_t = beta^(t-1) A_1 + (1 - beta) sum_{i=2..t} beta^(t-i) A_i
        let t = seq.len();
        let mut closed = seq[0].scale(beta.powi(t as i32 - 1));
        for (i, a) in seq.iter().enumerate().skip(1) {
            let w = (1.0 - beta) * beta.powi((t - 1 - i) as i32);
            closed = closed.add(&a.scale(w)).unwrap();
        }
        assert!(last.max_abs_diff(&closed).unwrap() < 1e-10);
    }

    #[test]
    fn buffers_are_independent() {
        let mut s = EmaState::new(0.5).unwrap();
        s.update(0, Branch::Conditional, &Tensor::scalar(1.0)).unwrap();
        s.update(0, Branch::Unconditional, &Tensor::scalar(3.0)).unwrap();
        s.update(1, Branch::Conditional, &Tensor::scalar(5.0)).unwrap();
        s.update(0, Branch::Conditional, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(s.get(0, Branch::Conditional).unwrap().data(), &[0.5]);
        assert_eq!(s.get(0, Branch::Unconditional).unwrap().data(), &[3.0]);
        assert_eq!(s.get(1, Branch::Conditional).unwrap().data(), &[5.0]);
    }

    #[test]
    fn shape_change_is_an_error() {
        let mut s = EmaState::new(0.5).unwrap();
        s.update(0, Branch::Conditional, &Tensor::zeros([2])).unwrap();
        assert!(matches!(
            s.update(0, Branch::Conditional, &Tensor::zeros([3])),
            Err(Error::EmaShapeChanged { layer: 0, .. })
        ));
    }

    #[test]
    fn halflife_values() {
        assert_eq!(beta_from_halflife(1.0).unwrap(), 0.5);
        assert!((beta_from_halflife(50.0).unwrap() - 0.986233).abs() < 1e-6);
        assert!(beta_from_halflife(0.0).is_err());
        assert!(beta_from_halflife(-3.0).is_err());
    }

    #[test]
    fn halflife_gap_halves() {
        for h in [1usize, 10, 50] {
            let beta = beta_from_halflife(h as f64).unwrap();
            let mut s = EmaState::new(beta).unwrap();
            s.update(0, Branch::Conditional, &Tensor::scalar(1.0)).unwrap();
            for _ in 0..h {
                s.update(0, Branch::Conditional, &Tensor::scalar(0.0)).unwrap();
            }
            let gap = s.get(0, Branch::Conditional).unwrap().data()[0];
            assert!((gap - 0.5).abs() < 1e-9, "H={h}: {gap}");
        }
    }

    #[test]
    fn rejects_bad_beta() {
        assert!(EmaState::new(1.0).is_err());
        assert!(EmaState::new(0.0).is_err());
    }
}
