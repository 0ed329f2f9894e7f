//! The single JSON document every subcommand reads.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use emag_core::diffusion::{NoiseSchedule, ScheduleKind};
use emag_core::guidance::GuidanceConfig;
use emag_core::model::train::TrainConfig;
use emag_core::model::ModelConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Number of procedurally generated training images.
    #[serde(default = "defaults::data_size")]
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: defaults::data_size(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Defaults to 50 for VP and 26 for flow.
    #[serde(default)]
    pub steps: Option<usize>,
}

impl ScheduleConfig {
    pub fn build(&self) -> CliResult<NoiseSchedule> {
        let steps = self.steps.unwrap_or(match self.kind {
            ScheduleKind::Vp => 50,
            ScheduleKind::Flow => 26,
        });
        Ok(NoiseSchedule::new(self.kind, steps)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassChoice {
    /// Alternate through the classes.
    Balanced,
    /// Unconditional sampling.
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Classes {
    Fixed(usize),
    Choice(ClassChoice),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Checkpoint directory, relative to the config file.
    pub checkpoint: String,
    /// Degraded model for autoguidance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_checkpoint: Option<String>,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default = "defaults::classes")]
    pub classes: Classes,
}

impl SamplingConfig {
    pub fn labels(&self, num_classes: usize) -> CliResult<Vec<Option<usize>>> {
        if self.samples == 0 {
            return Err(CliError::Config("sampling.samples must be positive".into()));
        }
        Ok(match self.classes {
            Classes::Fixed(c) if c >= num_classes => {
                return Err(CliError::Config(format!(
                    "sampling.classes {c} is out of range for {num_classes} classes"
                )))
            }
            Classes::Fixed(c) => vec![Some(c); self.samples],
            Classes::Choice(ClassChoice::Balanced) => {
                (0..self.samples).map(|i| Some(i % num_classes)).collect()
            }
            Classes::Choice(ClassChoice::Null) => vec![None; self.samples],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Neighbour count for PRDC.
    #[serde(default = "defaults::k")]
    pub k: usize,
    /// Size of the reference set drawn from the data generator.
    #[serde(default = "defaults::reference")]
    pub reference: usize,
    #[serde(default = "defaults::reference_seed")]
    pub reference_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: defaults::k(),
            reference: defaults::reference(),
            reference_seed: defaults::reference_seed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub w_cfg: Vec<f64>,
    pub w_e: Vec<f64>,
}

mod defaults {
    use super::{ClassChoice, Classes};

    pub fn data_size() -> usize {
        1024
    }
    pub fn samples() -> usize {
        16
    }
    pub fn classes() -> Classes {
        Classes::Choice(ClassChoice::Balanced)
    }
    pub fn k() -> usize {
        5
    }
    pub fn reference() -> usize {
        512
    }
    pub fn reference_seed() -> u64 {
        1
    }
}

/// A parsed config together with the directory relative paths resolve against.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: LabConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(CliError::io(format!("cannot read config {}", path.display())))?;
        let config: LabConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("config is missing the `{name}` section")))
}

/// First 16 hex digits of the SHA-256 of a value's canonical JSON (object
/// keys sorted).
pub fn config_hash<T: Serialize>(value: &T) -> CliResult<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    let digest = Sha256::digest(&bytes);
    Ok(hex::encode(digest)[..16].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_mode_is_named() {
        let err = serde_json::from_str::<LabConfig>(r#"{"model": {"layers": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<LabConfig>(r#"{"guidance": {"mode": "cfg"}, "extra": 1}"#).unwrap_err();
        assert!(err.to_string().contains("extra"));
        assert!(serde_json::from_str::<LabConfig>(r#"{"schedule": {"kind": "vp", "step": 3}}"#).is_err());
    }

    #[test]
    fn class_choices() {
        let s: SamplingConfig = serde_json::from_str(r#"{"checkpoint": "c", "samples": 3}"#).unwrap();
        assert_eq!(s.labels(2).unwrap(), [Some(0), Some(1), Some(0)]);
        let s: SamplingConfig = serde_json::from_str(r#"{"checkpoint": "c", "samples": 2, "classes": 1}"#).unwrap();
        assert_eq!(s.labels(2).unwrap(), [Some(1), Some(1)]);
        let s: SamplingConfig = serde_json::from_str(r#"{"checkpoint": "c", "samples": 2, "classes": "null"}"#).unwrap();
        assert_eq!(s.labels(2).unwrap(), [None, None]);
        let s: SamplingConfig = serde_json::from_str(r#"{"checkpoint": "c", "classes": 5}"#).unwrap();
        assert!(s.labels(2).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": 2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": 2, "a": 1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 16);
    }

    #[test]
    fn default_schedule_lengths() {
        let flow = ScheduleConfig { kind: ScheduleKind::Flow, steps: None };
        assert_eq!(flow.build().unwrap().steps(), 26);
        let vp = ScheduleConfig { kind: ScheduleKind::Vp, steps: None };
        assert_eq!(vp.build().unwrap().steps(), 50);
    }
}
