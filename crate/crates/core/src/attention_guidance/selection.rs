//! Per-layer disagreement between the running average and the live map, and
//! the argmax that picks which layer to perturb.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inclusive range of candidate layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange {
    pub min: usize,
    pub max: usize,
}

impl LayerRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min > max {
            return Err(Error::config(format!("empty layer range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.min..=self.max
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers().contains(&layer)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.min > self.max {
            return Err(Error::config(format!(
                "empty layer range [{}, {}]",
                self.min, self.max
            )));
        }
        if self.max >= num_layers {
            return Err(Error::config(format!(
                "layer range [{}, {}] exceeds the model's {num_layers} layers",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Mean absolute elementwise difference.
pub fn layer_delta(ema: &Tensor, attn: &Tensor) -> Result<f64> {
    ema.ensure_same_shape(attn, "layer delta")?;
    if attn.numel() == 0 {
        return Ok(0.0);
    }
    let total: f64 = ema
        .data()
        .iter()
        .zip(attn.data())
        .map(|(e, a)| (e - a).abs())
        .sum();
    Ok(total / attn.numel() as f64)
}

/// Candidate layer with the largest delta; the lowest index wins ties.
pub fn select_layer(deltas: &BTreeMap<usize, f64>, range: LayerRange) -> Result<usize> {
    if range.min > range.max {
        return Err(Error::config("empty layer range"));
    }
    let mut best: Option<(usize, f64)> = None;
    for layer in range.layers() {
        let d = *deltas
            .get(&layer)
            .ok_or_else(|| Error::config(format!("no delta recorded for layer {layer}")))?;
        if d.is_nan() {
            return Err(Error::Numeric(format!("delta for layer {layer} is NaN")));
        }
        if best.is_none_or(|(_, b)| d > b) {
            best = Some((layer, d));
        }
    }
    Ok(best.expect("range is non-empty").0)
}
