//! Guidance configuration and the combination rules.

pub mod combinators;

use serde::{Deserialize, Serialize};

pub use combinators::{
    add_contrast, apg_combine, apg_decompose, autoguidance_combine, cads_anneal, cfg_combine,
    emag_conditional, emag_conditional_step, emag_unconditional, extrapolate, pag_combine,
    s2_combine, ApgParams, ApgState, BranchPredictions, CadsParams,
};

use crate::attention_guidance::{
    beta_from_halflife, EmagSettings, GuidanceWindow, LayerRange, Partition, SagBlur, DEFAULT_BETA,
};
use crate::error::{Error, Result};
use crate::model::TokenLayout;

/// EMAG scale used for class-conditional sampling when none is given.
pub const DEFAULT_W_E_CONDITIONAL: f64 = 1.75;
/// EMAG scale used for unconditional sampling when none is given.
pub const DEFAULT_W_E_UNCONDITIONAL: f64 = 5.125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Emag,
    EmagI,
    Autoguidance,
    Pag,
    Seg,
    Sag,
    S2,
}

impl GuidanceMode {
    pub fn is_emag(self) -> bool {
        matches!(self, GuidanceMode::Emag | GuidanceMode::EmagI)
    }

    /// Whether conditional sampling in this mode evaluates the null branch.
    pub fn uses_cfg(self) -> bool {
        !matches!(self, GuidanceMode::None | GuidanceMode::Autoguidance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    #[serde(default = "defaults::w_cfg")]
    pub w_cfg: f64,
    /// EMAG scale; defaults depend on whether sampling is conditional.
    #[serde(default)]
    pub w_e: Option<f64>,
    /// Scale of the PAG, SEG, SAG and autoguidance contrasts.
    #[serde(default = "defaults::w_baseline")]
    pub w_baseline: f64,
    /// Defaults to the last fifth of the schedule for both end and warmup.
    #[serde(default)]
    pub window: Option<GuidanceWindow>,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// EMA decay. Mutually exclusive with `halflife`.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub halflife: Option<f64>,
    /// Candidate layers for EMAG and the perturbed layers of PAG, SEG and SAG.
    #[serde(default = "defaults::layers")]
    pub layers: LayerRange,
    #[serde(default = "defaults::s2_scale")]
    pub s2_scale: f64,
    #[serde(default = "defaults::s2_drop")]
    pub s2_drop: f64,
    #[serde(default = "defaults::sag_threshold")]
    pub sag_threshold: f64,
    #[serde(default = "defaults::sag_kernel")]
    pub sag_kernel: usize,
    #[serde(default = "defaults::sag_sigma")]
    pub sag_sigma: f64,
    #[serde(default)]
    pub apg: Option<ApgParams>,
    #[serde(default)]
    pub cads: Option<CadsParams>,
}

mod defaults {
    use crate::attention_guidance::LayerRange;

    pub fn w_cfg() -> f64 {
        3.0
    }
    pub fn w_baseline() -> f64 {
        2.0
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn layers() -> LayerRange {
        LayerRange { min: 1, max: 2 }
    }
    pub fn s2_scale() -> f64 {
        0.25
    }
    pub fn s2_drop() -> f64 {
        0.1
    }
    pub fn sag_threshold() -> f64 {
        1.0
    }
    pub fn sag_kernel() -> usize {
        9
    }
    pub fn sag_sigma() -> f64 {
        1.0
    }
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode) -> Self {
        Self {
            mode,
            w_cfg: defaults::w_cfg(),
            w_e: None,
            w_baseline: defaults::w_baseline(),
            window: None,
            lambda: defaults::lambda(),
            beta: None,
            halflife: None,
            layers: defaults::layers(),
            s2_scale: defaults::s2_scale(),
            s2_drop: defaults::s2_drop(),
            sag_threshold: defaults::sag_threshold(),
            sag_kernel: defaults::sag_kernel(),
            sag_sigma: defaults::sag_sigma(),
            apg: None,
            cads: None,
        }
    }

    pub fn w_e(&self, conditional: bool) -> f64 {
        self.w_e.unwrap_or(if conditional {
            DEFAULT_W_E_CONDITIONAL
        } else {
            DEFAULT_W_E_UNCONDITIONAL
        })
    }

    pub fn resolved_beta(&self) -> Result<f64> {
        match (self.beta, self.halflife) {
            (Some(_), Some(_)) => Err(Error::config("set either beta or halflife, not both")),
            (Some(b), None) => Ok(b),
            (None, Some(h)) => beta_from_halflife(h).map_err(|e| Error::config(e.to_string())),
            (None, None) => Ok(DEFAULT_BETA),
        }
    }

    pub fn resolved_window(&self, t_max: usize) -> GuidanceWindow {
        self.window.unwrap_or_else(|| {
            let tail = (t_max / 5).max(1);
            GuidanceWindow {
                start: t_max,
                end: tail,
                warmup: tail,
            }
        })
    }

    pub fn partition(&self) -> Partition {
        match self.mode {
            GuidanceMode::EmagI => Partition::ImageOnly,
            _ => Partition::FullRow,
        }
    }

    pub fn sag_blur(&self) -> SagBlur {
        SagBlur {
            threshold: self.sag_threshold,
            kernel: self.sag_kernel,
            sigma: self.sag_sigma,
        }
    }

    pub fn emag_settings(&self, t_max: usize) -> Result<EmagSettings> {
        Ok(EmagSettings {
            window: self.resolved_window(t_max),
            beta: self.resolved_beta()?,
            lambda: self.lambda,
            range: self.layers,
            partition: self.partition(),
        })
    }

    /// Checks every field against the sampler length and the model.
    pub fn validate(&self, t_max: usize, layout: &TokenLayout) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be a nonnegative number, got {v}")))
            }
        };
        nonneg("w_cfg", self.w_cfg)?;
        nonneg("w_e", self.w_e.unwrap_or(0.0))?;
        nonneg("w_baseline", self.w_baseline)?;
        nonneg("s2_scale", self.s2_scale)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.s2_drop) {
            return Err(Error::config("s2_drop must lie in [0, 1]"));
        }
        let beta = self.resolved_beta()?;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config(format!("beta must lie in (0, 1), got {beta}")));
        }
        if self.mode.is_emag() {
            self.resolved_window(t_max).validate(t_max)?;
        }
        self.layers.validate(layout.layers)?;
        crate::attention_guidance::perturb::gaussian_kernel(self.sag_kernel, self.sag_sigma)?;
        if let Some(apg) = &self.apg {
            apg.validate()?;
        }
        if let Some(cads) = &self.cads {
            cads.validate()?;
        }
        Ok(())
    }
}
