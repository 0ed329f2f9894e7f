//! Guided reverse-time sampling.
//!
//! Each step runs the clean forward of the reference branch (conditional
//! when labels are given, unconditional otherwise) with an observer that
//! captures every layer's attention, then whatever extra forwards the
//! guidance mode needs, combines them, and advances the latent with the
//! schedule's deterministic update.

pub mod dump;

use std::collections::BTreeMap;

use crate::attention_guidance::{
    pag_identity, sag_degrade, sag_mask, seg_query_mean, Branch, EmagController, EmagDecision,
};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::guidance::{
    add_contrast, apg_combine, autoguidance_combine, cads_anneal, cfg_combine,
    emag_conditional_step, emag_unconditional, pag_combine, s2_combine, ApgState,
    BranchPredictions, GuidanceConfig, GuidanceMode,
};
use crate::hooks::AttentionHookBus;
use crate::metrics::attention_entropy;
use crate::model::{ConditionEmbedding, Conditioning, Denoiser, Prediction};
use crate::rng::{stream, NoiseStream};
use crate::tensor::Tensor;

/// Everything recorded at one sampler step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Discrete step index, counting down from the schedule length.
    pub step: usize,
    /// Normalised model time fed to the denoiser.
    pub time: f64,
    pub x_t: Tensor,
    pub preds: BranchPredictions,
    pub combined: Tensor,
    pub emag: Option<EmagDecision>,
    /// Blocks skipped by the layer-drop perturbation.
    pub dropped: Vec<usize>,
    /// Mean attention entropy of each layer on the clean reference branch.
    pub entropy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerTrajectory {
    pub kind: ScheduleKind,
    pub seed: u64,
    pub labels: Vec<Option<usize>>,
    pub steps: Vec<StepRecord>,
    /// Final latents, `(batch, pixels)`.
    pub samples: Tensor,
}

impl SamplerTrajectory {
    pub fn conditional(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn decisions(&self) -> impl Iterator<Item = &EmagDecision> {
        self.steps.iter().filter_map(|s| s.emag.as_ref())
    }
}

fn conditional_labels(labels: &[Option<usize>]) -> Result<bool> {
    if labels.is_empty() {
        return Err(Error::config("sampling needs at least one sample"));
    }
    let known = labels.iter().filter(|l| l.is_some()).count();
    if known != 0 && known != labels.len() {
        return Err(Error::config("labels must be all classes or all null"));
    }
    Ok(known != 0)
}

fn plain_forward<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    time: &[f64],
    cond: &Conditioning,
) -> Result<Tensor> {
    model.predict(x, time, cond, &mut AttentionHookBus::new())
}

fn observed_forward<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    time: &[f64],
    cond: &Conditioning,
) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
    let mut maps = BTreeMap::new();
    let out = {
        let mut bus = AttentionHookBus::new();
        bus.observe(|layer, attn| {
            maps.insert(layer, attn.clone());
        });
        model.predict(x, time, cond, &mut bus)?
    };
    Ok((out, maps))
}

fn anneal_condition(
    base: &ConditionEmbedding,
    t_norm: f64,
    params: &crate::guidance::CadsParams,
    rng: &mut NoiseStream,
) -> Result<ConditionEmbedding> {
    let class_noise = rng.normal_tensor(base.class.shape().to_vec());
    let class = cads_anneal(&base.class, t_norm, params, &class_noise)?;
    let text = match &base.text {
        Some(t) => {
            let noise = rng.normal_tensor(t.shape().to_vec());
            Some(cads_anneal(t, t_norm, params, &noise)?)
        }
        None => None,
    };
    Ok(ConditionEmbedding { class, text })
}

fn check_pairing<D: Denoiser + ?Sized>(model: &D, schedule: &NoiseSchedule) -> Result<()> {
    let ok = matches!(
        (model.prediction(), schedule.kind()),
        (Prediction::Eps, ScheduleKind::Vp) | (Prediction::Velocity, ScheduleKind::Flow)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!(
            "a {:?}-prediction model cannot drive a {:?} schedule",
            model.prediction(),
            schedule.kind()
        )))
    }
}

/// Runs one guided trajectory for `labels.len()` samples.
///
/// `weak` is the degraded model autoguidance contrasts against; other modes
/// ignore it. All randomness comes from `seed`.
pub fn run_sampler<D: Denoiser + ?Sized>(
    model: &D,
    weak: Option<&D>,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    labels: &[Option<usize>],
    seed: u64,
) -> Result<SamplerTrajectory> {
    let conditional = conditional_labels(labels)?;
    let layout = model.layout();
    let t_max = schedule.steps();
    check_pairing(model, schedule)?;
    guidance.validate(t_max, &layout)?;
    let mode = guidance.mode;
    let weak = match (mode, weak) {
        (GuidanceMode::Autoguidance, None) => {
            return Err(Error::config("autoguidance needs a weak model"))
        }
        (GuidanceMode::Autoguidance, Some(w)) => {
            check_pairing(w, schedule)?;
            if w.pixels() != model.pixels() {
                return Err(Error::config("weak model has a different sample size"));
            }
            Some(w)
        }
        _ => None,
    };

    let batch = labels.len();
    let pixels = model.pixels();
    let side = (pixels as f64).sqrt().round() as usize;
    let mut x = NoiseStream::new(seed, stream::INITIAL_NOISE).normal_tensor([batch, pixels]);
    let mut drop_rng = NoiseStream::new(seed, stream::LAYER_DROP);
    let mut cond_rng = NoiseStream::new(seed, stream::CONDITION_NOISE);
    let cads = guidance.cads.filter(|_| conditional);
    let base_embedding = match cads {
        Some(_) => Some(model.embed_condition(labels)?),
        None => None,
    };
    let mut controller = if mode.is_emag() {
        Some(EmagController::new(guidance.emag_settings(t_max)?, layout, t_max)?)
    } else {
        None
    };
    let mut apg_state = ApgState::default();
    let w_e = guidance.w_e(conditional);
    let w_b = guidance.w_baseline;
    let branch = if conditional {
        Branch::Conditional
    } else {
        Branch::Unconditional
    };

    let mut steps = Vec::with_capacity(t_max);
    for t in schedule.sampler_steps() {
        let time_value = schedule.model_time(t);
        let time = vec![time_value; batch];
        let mut cond_c = Conditioning::labels(labels.to_vec());
        if let (Some(params), Some(base)) = (&cads, &base_embedding) {
            let t_norm = t as f64 / t_max as f64;
            cond_c.embedding = Some(anneal_condition(base, t_norm, params, &mut cond_rng)?);
        }
        let cond_u = Conditioning::null(batch);
        let ref_cond = if conditional { &cond_c } else { &cond_u };

        let (reference, maps) = observed_forward(model, &x, &time, ref_cond)?;
        let entropy = (0..layout.layers)
            .map(|l| maps.get(&l).map_or(0.0, attention_entropy))
            .collect();
        let mut preds = BranchPredictions::default();
        let uncond = if conditional {
            preds.eps_cond = Some(reference.clone());
            if mode.uses_cfg() {
                let u = plain_forward(model, &x, &time, &cond_u)?;
                preds.eps_uncond = Some(u.clone());
                Some(u)
            } else {
                None
            }
        } else {
            preds.eps_uncond = Some(reference.clone());
            None
        };
        // Plain CFG, or APG when configured; only called in conditional mode.
        let mut guided = |u: &Tensor, c: &Tensor| -> Result<Tensor> {
            match &guidance.apg {
                Some(p) => apg_combine(u, c, guidance.w_cfg, p, &mut apg_state),
                None => cfg_combine(u, c, guidance.w_cfg),
            }
        };
        let set_perturbed = |preds: &mut BranchPredictions, p: Tensor| {
            if conditional {
                preds.eps_cond_perturbed = Some(p);
            } else {
                preds.eps_uncond_perturbed = Some(p);
            }
        };

        let mut decision = None;
        let mut dropped = Vec::new();
        let combined = match mode {
            GuidanceMode::None => reference.clone(),
            GuidanceMode::Cfg => guided(uncond.as_ref().expect("cfg branch"), &reference)?,
            GuidanceMode::Emag | GuidanceMode::EmagI => {
                let ctrl = controller.as_mut().expect("emag controller");
                let d = if ctrl.active(t) {
                    Some(ctrl.accumulate(t, branch, &maps)?)
                } else {
                    None
                };
                let perturbed = match &d {
                    Some(d) if d.replace => {
                        let mut bus = AttentionHookBus::new();
                        ctrl.install(d, &mut bus)?;
                        Some(model.predict(&x, &time, ref_cond, &mut bus)?)
                    }
                    _ => None,
                };
                decision = d;
                match (conditional, perturbed) {
                    (true, Some(p)) => {
                        set_perturbed(&mut preds, p);
                        let c_bar = emag_conditional_step(&preds, w_e)?;
                        guided(uncond.as_ref().expect("cfg branch"), &c_bar)?
                    }
                    (true, None) => guided(uncond.as_ref().expect("cfg branch"), &reference)?,
                    (false, Some(p)) => {
                        let out = emag_unconditional(&reference, &p, w_e)?;
                        set_perturbed(&mut preds, p);
                        out
                    }
                    (false, None) => reference.clone(),
                }
            }
            GuidanceMode::Autoguidance => {
                let weak_pred = plain_forward(weak.expect("weak model"), &x, &time, ref_cond)?;
                let out = autoguidance_combine(&weak_pred, &reference, w_b)?;
                set_perturbed(&mut preds, weak_pred);
                out
            }
            GuidanceMode::Pag | GuidanceMode::Sag => {
                let perturbed = if mode == GuidanceMode::Pag {
                    let mut bus = AttentionHookBus::new();
                    for l in guidance.layers.layers() {
                        bus.on_attention(l, pag_identity);
                    }
                    model.predict(&x, &time, ref_cond, &mut bus)?
                } else {
                    let mut mean_map: Option<Tensor> = None;
                    for l in guidance.layers.layers() {
                        let m = &maps[&l];
                        mean_map = Some(match mean_map {
                            None => m.clone(),
                            Some(acc) => acc.add(m)?,
                        });
                    }
                    let n = guidance.layers.layers().count() as f64;
                    let mean_map = mean_map.expect("non-empty range").scale(1.0 / n);
                    let mask = sag_mask(&mean_map, &layout, side, guidance.sag_threshold)?;
                    let degraded = sag_degrade(&x, &mask, &guidance.sag_blur())?;
                    plain_forward(model, &degraded, &time, ref_cond)?
                };
                let out = match &uncond {
                    Some(u) => add_contrast(&guided(u, &reference)?, &reference, &perturbed, w_b)?,
                    None => pag_combine(&reference, &perturbed, w_b)?,
                };
                set_perturbed(&mut preds, perturbed);
                out
            }
            GuidanceMode::Seg => {
                let mut bus = AttentionHookBus::new();
                for l in guidance.layers.layers() {
                    bus.on_query(l, move |q| seg_query_mean(q, &layout));
                }
                let perturbed = model.predict(&x, &time, &cond_u, &mut bus)?;
                let out = match &uncond {
                    Some(u) => add_contrast(&guided(u, &reference)?, u, &perturbed, w_b)?,
                    None => pag_combine(&reference, &perturbed, w_b)?,
                };
                preds.eps_uncond_perturbed = Some(perturbed);
                out
            }
            GuidanceMode::S2 => {
                let mut bus = AttentionHookBus::new();
                for l in 0..layout.layers {
                    if drop_rng.bernoulli(guidance.s2_drop) {
                        bus.skip_block(l);
                        dropped.push(l);
                    }
                }
                let perturbed = model.predict(&x, &time, ref_cond, &mut bus)?;
                let base = match &uncond {
                    Some(u) => guided(u, &reference)?,
                    None => reference.clone(),
                };
                let out = s2_combine(&base, &perturbed, guidance.s2_scale)?;
                set_perturbed(&mut preds, perturbed);
                out
            }
        };

        let next = schedule.reverse_step(&x, &combined, t)?;
        if !next.is_finite() {
            return Err(Error::SamplerDivergence { step: t });
        }
        steps.push(StepRecord {
            step: t,
            time: time_value,
            x_t: std::mem::replace(&mut x, next),
            preds,
            combined,
            emag: decision,
            dropped,
            entropy,
        });
    }
    Ok(SamplerTrajectory {
        kind: schedule.kind(),
        seed,
        labels: labels.to_vec(),
        steps,
        samples: x,
    })
}
