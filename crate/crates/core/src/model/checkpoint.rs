//! On-disk checkpoints: `manifest.json` plus one CSV blob per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyModelParams};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT: &str = "emag-lab-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub seed: u64,
    /// Free-form training hyperparameters, recorded for provenance.
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn save(
    params: &ToyModelParams,
    seed: u64,
    hyperparameters: serde_json::Value,
    dir: impl AsRef<Path>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in &params.tensors {
        let file = format!("{name}.csv");
        t.save_csv(dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        model: params.config.clone(),
        seed,
        hyperparameters,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

pub fn load(dir: impl AsRef<Path>) -> Result<(ToyModelParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    manifest.model.validate()?;
    let mut tensors = ParamSet::new();
    for entry in &manifest.tensors {
        let t = Tensor::load_csv(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Parse(format!(
                "tensor `{}` has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        tensors.insert(entry.name.clone(), t);
    }
    // Reject checkpoints whose parameter set does not match the config.
    let reference = ToyModelParams::init(manifest.model.clone(), 0)?;
    for (name, t) in &reference.tensors {
        match tensors.get(name) {
            Some(found) if found.shape() == t.shape() => {}
            _ => {
                return Err(Error::Parse(format!(
                    "checkpoint is missing or misshapes `{name}`"
                )))
            }
        }
    }
    if tensors.len() != reference.tensors.len() {
        return Err(Error::Parse("checkpoint has unexpected tensors".into()));
    }
    Ok((
        ToyModelParams {
            config: manifest.model.clone(),
            tensors,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Prediction;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = ToyModelParams::init(ModelConfig::new(Prediction::Eps).joint(4), 2).unwrap();
        save(&p, 2, serde_json::json!({"steps": 0}), dir.path()).unwrap();
        let (q, m) = load(dir.path()).unwrap();
        assert_eq!(m.seed, 2);
        for (name, t) in &p.tensors {
            assert!(t.bit_eq(&q.tensors[name]), "{name}");
        }
    }

    #[test]
    fn detects_shape_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let p = ToyModelParams::init(ModelConfig::new(Prediction::Eps), 2).unwrap();
        save(&p, 2, serde_json::Value::Null, dir.path()).unwrap();
        Tensor::zeros([3]).save_csv(dir.path().join("head.b.csv")).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
