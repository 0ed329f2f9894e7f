//! Command-line harness around `emag-core`: training, guided sampling,
//! analysis and guidance-scale sweeps with reproducible run directories.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_analyze, cmd_sample, cmd_sweep, cmd_train, output_root, RunManifest};
pub use config::{LabConfig, LoadedConfig};
pub use error::{CliError, CliResult};
