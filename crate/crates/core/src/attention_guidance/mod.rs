//! Attention-map EMA guidance: the running average, the guidance window,
//! adaptive layer selection and the hook that swaps in the blended map.
//! Baseline attention perturbations live in [`perturb`].

pub mod blend;
pub mod ema;
pub mod perturb;
pub mod selection;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use blend::{blend_replace, emag_partition_apply, extract_region, make_stochastic, Partition};
pub use ema::{beta_from_halflife, ema_blend, Branch, EmaState, DEFAULT_BETA};
pub use perturb::{pag_identity, sag_degrade, sag_mask, seg_query_mean, SagBlur};
pub use selection::{layer_delta, select_layer, LayerRange};

use crate::error::{Error, Result};
use crate::hooks::AttentionHookBus;
use crate::model::TokenLayout;
use crate::tensor::Tensor;

/// Sampler steps (counted down from `t_max`) where the EMA is active.
///
/// Both accumulation and replacement happen only for `end < t < start`;
/// replacement additionally waits for `warmup` accumulated steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWindow {
    pub start: usize,
    pub end: usize,
    pub warmup: usize,
}

impl GuidanceWindow {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.end == 0 {
            return Err(Error::config("window end must be at least 1"));
        }
        if self.end >= self.start {
            return Err(Error::config(format!(
                "window end {} must be below window start {}",
                self.end, self.start
            )));
        }
        if self.start > t_max {
            return Err(Error::config(format!(
                "window start {} exceeds the {t_max} sampler steps",
                self.start
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t: usize) -> bool {
        self.end < t && t < self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmagSettings {
    pub window: GuidanceWindow,
    pub beta: f64,
    pub lambda: f64,
    pub range: LayerRange,
    pub partition: Partition,
}

/// What the controller decided for one branch at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct EmagDecision {
    pub step: usize,
    pub branch: Branch,
    pub deltas: BTreeMap<usize, f64>,
    pub selected: usize,
    /// False during warmup.
    pub replace: bool,
}

/// Per-trajectory EMAG state machine.
pub struct EmagController {
    settings: EmagSettings,
    layout: TokenLayout,
    ema: EmaState,
    in_window: BTreeMap<Branch, usize>,
}

impl EmagController {
    pub fn new(settings: EmagSettings, layout: TokenLayout, t_max: usize) -> Result<Self> {
        settings.window.validate(t_max)?;
        settings.range.validate(layout.layers)?;
        if !(0.0..=1.0).contains(&settings.lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                settings.lambda
            )));
        }
        Ok(Self {
            ema: EmaState::new(settings.beta)?,
            settings,
            layout,
            in_window: BTreeMap::new(),
        })
    }

    pub fn settings(&self) -> &EmagSettings {
        &self.settings
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn active(&self, t: usize) -> bool {
        self.settings.window.contains(t)
    }

    /// Folds the clean branch's attention maps into the EMA, measures each
    /// candidate layer's drift and picks the layer to perturb.
    pub fn accumulate(
        &mut self,
        t: usize,
        branch: Branch,
        clean: &BTreeMap<usize, Tensor>,
    ) -> Result<EmagDecision> {
        if !self.active(t) {
            return Err(Error::Domain(format!("step {t} is outside the guidance window")));
        }
        let mut deltas = BTreeMap::new();
        for layer in self.settings.range.layers() {
            let attn = clean
                .get(&layer)
                .ok_or_else(|| Error::config(format!("no attention captured for layer {layer}")))?;
            let ema = self.ema.update(layer, branch, attn)?;
            deltas.insert(layer, layer_delta(ema, attn)?);
        }
        let selected = select_layer(&deltas, self.settings.range)?;
        let count = self.in_window.entry(branch).or_insert(0);
        *count += 1;
        Ok(EmagDecision {
            step: t,
            branch,
            deltas,
            selected,
            replace: *count > self.settings.window.warmup,
        })
    }

    /// Registers the blended-map interceptor for a replacing decision.
    pub fn install<'a>(&'a self, decision: &EmagDecision, bus: &mut AttentionHookBus<'a>) -> Result<()> {
        if !decision.replace {
            return Ok(());
        }
        let ema = self
            .ema
            .get(decision.selected, decision.branch)
            .ok_or_else(|| Error::config("no EMA buffer for the selected layer"))?;
        let mode = if self.layout.text_tokens == 0 {
            Partition::FullRow
        } else {
            self.settings.partition
        };
        let region = extract_region(ema, &self.layout, mode)?;
        let (layout, lambda) = (self.layout, self.settings.lambda);
        bus.on_attention(decision.selected, move |attn| {
            emag_partition_apply(attn, &layout, mode, |r| blend_replace(r, &region, lambda))
        });
        Ok(())
    }
}

/// One row per candidate layer: `step,branch,layer,delta,chosen_layer,lambda,beta`.
pub fn write_diagnostics_csv(
    decisions: &[EmagDecision],
    lambda: f64,
    beta: f64,
    mut w: impl Write,
) -> Result<()> {
    writeln!(w, "step,branch,layer,delta,chosen_layer,lambda,beta")?;
    for d in decisions {
        for (layer, delta) in &d.deltas {
            writeln!(
                w,
                "{},{},{},{:?},{},{:?},{:?}",
                d.step,
                d.branch.as_str(),
                layer,
                delta,
                d.selected,
                lambda,
                beta
            )?;
        }
    }
    Ok(())
}
