//! Attention-EMA guidance laboratory.
//!
//! The crate bundles a minimal dense tensor kernel with a gradient tape, a
//! toy diffusion transformer with hookable self-attention, deterministic
//! DDIM and flow-matching samplers, the attention-EMA guidance machinery
//! together with the baseline guidance rules it is compared against, and
//! evaluation diagnostics (Hopfield energy, attention entropy, Fréchet
//! distance, PRDC).

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention_guidance;
pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod hooks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use attention_guidance::{Branch, EmaState, EmagController, EmagDecision, GuidanceWindow, LayerRange, Partition};
pub use diffusion::{NoiseSchedule, ScheduleKind};
pub use guidance::{BranchPredictions, GuidanceConfig, GuidanceMode};
pub use metrics::{MetricReport, Prdc};
pub use model::{Denoiser, ModelConfig, Prediction, ToyModelParams};
pub use sampler::{run_sampler, SamplerTrajectory};
