//! Diagnostics and sample-quality metrics.

pub mod distribution;
pub mod hopfield;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use distribution::{frechet_from_moments, frechet_gaussian, gaussian_moments, prdc, Prdc};
pub use hopfield::{hopfield_energy, hopfield_update, HopfieldInstance};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over all rows of `-sum p ln p`, in nats.
pub fn attention_entropy(attn: &Tensor) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for row in attn.rows() {
        total -= row
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        rows += 1;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub step: usize,
    pub layer: usize,
    pub mean_entropy_nats: f64,
}

pub fn write_entropy_csv(points: &[EntropyPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,layer,mean_entropy_nats")?;
    for p in points {
        writeln!(w, "{},{},{:?}", p.step, p.layer, p.mean_entropy_nats)?;
    }
    Ok(())
}

pub fn read_entropy_csv(text: &str) -> Result<Vec<EntropyPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,layer,mean_entropy_nats") {
        return Err(Error::Parse("entropy CSV has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::Parse(format!("bad entropy row `{l}`"));
            let mut f = l.split(',');
            let mut next = || f.next().ok_or_else(bad);
            Ok(EntropyPoint {
                step: next()?.parse().map_err(|_| bad())?,
                layer: next()?.parse().map_err(|_| bad())?,
                mean_entropy_nats: next()?.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Distribution metrics of a sample set against reference data, plus the
/// attention-entropy trace of the runs that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub reference: usize,
    pub k: usize,
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub entropy: Vec<EntropyPoint>,
}

impl MetricReport {
    pub fn compute(reference: &Tensor, samples: &Tensor, k: usize, entropy: Vec<EntropyPoint>) -> Result<Self> {
        if samples.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::config("no samples to evaluate"));
        }
        let p = prdc(reference, samples, k)?;
        Ok(Self {
            samples: samples.shape()[0],
            reference: reference.shape()[0],
            k,
            frechet: frechet_gaussian(reference, samples)?,
            precision: p.precision,
            recall: p.recall,
            density: p.density,
            coverage: p.coverage,
            entropy,
        })
    }
}
