//! On-disk layout of a sampled run: final samples, a JSON step index, one
//! wide CSV per step, EMAG diagnostics and the entropy trace.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SamplerTrajectory, StepRecord};
use crate::attention_guidance::write_diagnostics_csv;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::metrics::{read_entropy_csv, write_entropy_csv, EntropyPoint};
use crate::tensor::Tensor;

pub const SAMPLES: &str = "samples.csv";
pub const INDEX: &str = "trajectory.json";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const ENTROPY: &str = "entropy.csv";
pub const STEPS_DIR: &str = "steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepIndex {
    pub step: usize,
    pub time: f64,
    pub file: String,
    pub selected_layer: Option<usize>,
    pub replaced: bool,
    pub dropped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryIndex {
    pub kind: ScheduleKind,
    pub seed: u64,
    pub labels: Vec<Option<usize>>,
    pub samples: String,
    pub steps: Vec<StepIndex>,
}

const COLUMNS: [&str; 6] = [
    "x_t",
    "eps_uncond",
    "eps_cond",
    "eps_cond_perturbed",
    "eps_uncond_perturbed",
    "combined",
];

fn step_csv(rec: &StepRecord) -> String {
    let cols: [Option<&Tensor>; 6] = [
        Some(&rec.x_t),
        rec.preds.eps_uncond.as_ref(),
        rec.preds.eps_cond.as_ref(),
        rec.preds.eps_cond_perturbed.as_ref(),
        rec.preds.eps_uncond_perturbed.as_ref(),
        Some(&rec.combined),
    ];
    let (batch, pixels) = (rec.x_t.shape()[0], rec.x_t.shape()[1]);
    let mut out = format!("sample,pixel,{}\n", COLUMNS.join(","));
    for b in 0..batch {
        for p in 0..pixels {
            let _ = write!(out, "{b},{p}");
            for c in &cols {
                match c {
                    Some(t) => {
                        let _ = write!(out, ",{:?}", t.data()[b * pixels + p]);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn entropy_points(traj: &SamplerTrajectory) -> Vec<EntropyPoint> {
    traj.steps
        .iter()
        .flat_map(|s| {
            s.entropy.iter().enumerate().map(|(layer, &e)| EntropyPoint {
                step: s.step,
                layer,
                mean_entropy_nats: e,
            })
        })
        .collect()
}

/// Writes every artifact of `traj` under `dir` and returns the paths written.
pub fn write_trajectory(
    traj: &SamplerTrajectory,
    dir: impl AsRef<Path>,
    lambda: f64,
    beta: f64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join(STEPS_DIR))?;
    let mut written = Vec::new();
    let mut index = TrajectoryIndex {
        kind: traj.kind,
        seed: traj.seed,
        labels: traj.labels.clone(),
        samples: SAMPLES.to_string(),
        steps: Vec::new(),
    };
    for rec in &traj.steps {
        let file = format!("{STEPS_DIR}/step_{:04}.csv", rec.step);
        std::fs::write(dir.join(&file), step_csv(rec))?;
        written.push(dir.join(&file));
        index.steps.push(StepIndex {
            step: rec.step,
            time: rec.time,
            file,
            selected_layer: rec.emag.as_ref().map(|d| d.selected),
            replaced: rec.emag.as_ref().is_some_and(|d| d.replace),
            dropped: rec.dropped.clone(),
        });
    }
    traj.samples.save_csv(dir.join(SAMPLES))?;
    written.push(dir.join(SAMPLES));

    let decisions: Vec<_> = traj.decisions().cloned().collect();
    let mut diag = Vec::new();
    write_diagnostics_csv(&decisions, lambda, beta, &mut diag)?;
    std::fs::write(dir.join(DIAGNOSTICS), diag)?;
    written.push(dir.join(DIAGNOSTICS));

    let mut ent = Vec::new();
    write_entropy_csv(&entropy_points(traj), &mut ent)?;
    std::fs::write(dir.join(ENTROPY), ent)?;
    written.push(dir.join(ENTROPY));

    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    std::fs::write(dir.join(INDEX), text)?;
    written.push(dir.join(INDEX));
    Ok(written)
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<TrajectoryIndex> {
    let path = dir.as_ref().join(INDEX);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_samples(dir: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::load_csv(dir.as_ref().join(SAMPLES))
}

pub fn read_entropy(dir: impl AsRef<Path>) -> Result<Vec<EntropyPoint>> {
    read_entropy_csv(&std::fs::read_to_string(dir.as_ref().join(ENTROPY))?)
}
