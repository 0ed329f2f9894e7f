//! Rules that turn branch predictions into one guided prediction. They apply
//! unchanged to noise and velocity predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base + w * (target - base)`, returning `target` itself when `w == 1`.
pub fn extrapolate(base: &Tensor, target: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        target.ensure_same_shape(base, "guidance inputs")?;
        return Ok(target.clone());
    }
    base.zip_map(target, |b, t| b + w * (t - b))
}

pub fn cfg_combine(eps_u: &Tensor, eps_c: &Tensor, w: f64) -> Result<Tensor> {
    extrapolate(eps_u, eps_c, w)
}

pub fn autoguidance_combine(eps_weak: &Tensor, eps_strong: &Tensor, w: f64) -> Result<Tensor> {
    extrapolate(eps_weak, eps_strong, w)
}

/// `eps + w * (eps - eps_perturbed)`.
pub fn pag_combine(eps: &Tensor, eps_perturbed: &Tensor, w: f64) -> Result<Tensor> {
    eps.zip_map(eps_perturbed, |e, p| e + w * (e - p))
}

/// `out + w * (eps - eps_perturbed)`: a perturbation term added on top of an
/// already guided prediction.
pub fn add_contrast(out: &Tensor, eps: &Tensor, eps_perturbed: &Tensor, w: f64) -> Result<Tensor> {
    let diff = eps.sub(eps_perturbed)?;
    out.zip_map(&diff, |o, d| o + w * d)
}

/// Predictions from the branches a guidance rule evaluates at one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BranchPredictions {
    pub eps_uncond: Option<Tensor>,
    pub eps_cond: Option<Tensor>,
    pub eps_cond_perturbed: Option<Tensor>,
    pub eps_uncond_perturbed: Option<Tensor>,
}

impl BranchPredictions {
    pub fn validate(&self) -> Result<()> {
        let present: Vec<&Tensor> = [
            &self.eps_uncond,
            &self.eps_cond,
            &self.eps_cond_perturbed,
            &self.eps_uncond_perturbed,
        ]
        .into_iter()
        .flatten()
        .collect();
        for t in present.iter().skip(1) {
            t.ensure_same_shape(present[0], "branch predictions")?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        [
            ("eps_uncond", &self.eps_uncond),
            ("eps_cond", &self.eps_cond),
            ("eps_cond_perturbed", &self.eps_cond_perturbed),
            ("eps_uncond_perturbed", &self.eps_uncond_perturbed),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.as_ref().map(|t| (n, t)))
    }
}

fn need<'a>(t: &'a Option<Tensor>, name: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::config(format!("guidance needs the {name} prediction")))
}

/// The perturbed-conditional extrapolation `eps'_c + w_e (eps_c - eps'_c)`.
pub fn emag_conditional_step(preds: &BranchPredictions, w_e: f64) -> Result<Tensor> {
    extrapolate(
        need(&preds.eps_cond_perturbed, "perturbed conditional")?,
        need(&preds.eps_cond, "conditional")?,
        w_e,
    )
}

/// Two-step conditional update: the EMAG extrapolation, then CFG against
/// the unconditional prediction.
pub fn emag_conditional(preds: &BranchPredictions, w_e: f64, w_cfg: f64) -> Result<Tensor> {
    let guided = emag_conditional_step(preds, w_e)?;
    cfg_combine(need(&preds.eps_uncond, "unconditional")?, &guided, w_cfg)
}

/// `eps' + w_e (eps - eps')` for unconditional generation.
pub fn emag_unconditional(eps: &Tensor, eps_perturbed: &Tensor, w_e: f64) -> Result<Tensor> {
    extrapolate(eps_perturbed, eps, w_e)
}

/// `cfg_out - s * eps_perturbed_dropped`.
pub fn s2_combine(cfg_out: &Tensor, eps_dropped: &Tensor, s: f64) -> Result<Tensor> {
    if s == 0.0 {
        cfg_out.ensure_same_shape(eps_dropped, "guidance inputs")?;
        return Ok(cfg_out.clone());
    }
    cfg_out.zip_map(eps_dropped, |c, p| c - s * p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApgParams {
    /// Momentum coefficient on the previous update direction.
    #[serde(default = "apg_defaults::momentum")]
    pub momentum: f64,
    /// Norm clamp on the update direction.
    #[serde(default = "apg_defaults::norm_threshold")]
    pub norm_threshold: f64,
    /// Weight kept on the component parallel to the conditional prediction.
    #[serde(default)]
    pub parallel_weight: f64,
}

mod apg_defaults {
    pub fn momentum() -> f64 {
        -0.5
    }
    pub fn norm_threshold() -> f64 {
        7.5
    }
}

impl Default for ApgParams {
    fn default() -> Self {
        Self {
            momentum: apg_defaults::momentum(),
            norm_threshold: apg_defaults::norm_threshold(),
            parallel_weight: 0.0,
        }
    }
}

impl ApgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm_threshold > 0.0) {
            return Err(Error::config("APG norm threshold must be positive"));
        }
        if !self.momentum.is_finite() || !self.parallel_weight.is_finite() {
            return Err(Error::config("APG momentum and parallel weight must be finite"));
        }
        Ok(())
    }
}

/// Momentum buffer carried across the steps of one trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApgState {
    pub running: Option<Tensor>,
}

/// Splits `v` into its projection on `reference` and the orthogonal rest.
/// A zero reference leaves everything in the orthogonal part.
pub fn apg_decompose(v: &[f64], reference: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return (vec![0.0; v.len()], v.to_vec());
    }
    let k = v.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>() / rr;
    let par: Vec<f64> = reference.iter().map(|r| k * r).collect();
    let perp = v.iter().zip(&par).map(|(a, p)| a - p).collect();
    (par, perp)
}

/// Projected CFG applied per sample (per row of a `(batch, features)` tensor).
pub fn apg_combine(
    eps_u: &Tensor,
    eps_c: &Tensor,
    w: f64,
    params: &ApgParams,
    state: &mut ApgState,
) -> Result<Tensor> {
    let diff = eps_c.sub(eps_u)?;
    let running = match &state.running {
        Some(prev) => diff.zip_map(prev, |d, p| d + params.momentum * p)?,
        None => diff,
    };
    let mut out = eps_c.clone();
    if eps_c.numel() > 0 {
        for ((o, c), m) in out
            .rows_mut()
            .zip(eps_c.rows())
            .zip(running.rows())
        {
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = if norm > params.norm_threshold {
                params.norm_threshold / norm
            } else {
                1.0
            };
            let clamped: Vec<f64> = m.iter().map(|v| v * scale).collect();
            let (par, perp) = apg_decompose(&clamped, c);
            for ((o, pa), pe) in o.iter_mut().zip(&par).zip(&perp) {
                *o += (w - 1.0) * (pe + params.parallel_weight * pa);
            }
        }
    }
    state.running = Some(running);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CadsParams {
    #[serde(default = "cads_defaults::tau1")]
    pub tau1: f64,
    #[serde(default = "cads_defaults::tau2")]
    pub tau2: f64,
    #[serde(default = "cads_defaults::noise_scale")]
    pub noise_scale: f64,
    /// Mix between the rescaled and raw annealed condition.
    #[serde(default = "cads_defaults::psi")]
    pub psi: f64,
}

mod cads_defaults {
    pub fn tau1() -> f64 {
        0.6
    }
    pub fn tau2() -> f64 {
        0.9
    }
    pub fn noise_scale() -> f64 {
        0.25
    }
    pub fn psi() -> f64 {
        1.0
    }
}

impl Default for CadsParams {
    fn default() -> Self {
        Self {
            tau1: cads_defaults::tau1(),
            tau2: cads_defaults::tau2(),
            noise_scale: cads_defaults::noise_scale(),
            psi: cads_defaults::psi(),
        }
    }
}

impl CadsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 < self.tau2) {
            return Err(Error::config(format!(
                "CADS needs tau1 < tau2, got {} and {}",
                self.tau1, self.tau2
            )));
        }
        if !(0.0..=1.0).contains(&self.psi) || !(self.noise_scale >= 0.0) {
            return Err(Error::config("CADS psi must lie in [0, 1] and noise scale be nonnegative"));
        }
        Ok(())
    }

    /// Share of the clean condition kept at normalised time `t_norm`
    /// (1 at the start of sampling).
    pub fn gamma(&self, t_norm: f64) -> f64 {
        if t_norm <= self.tau1 {
            1.0
        } else if t_norm >= self.tau2 {
            0.0
        } else {
            (self.tau2 - t_norm) / (self.tau2 - self.tau1)
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mixes a condition embedding with noise early in sampling, then restores
/// its per-tensor mean and standard deviation with weight `psi`.
pub fn cads_anneal(c: &Tensor, t_norm: f64, params: &CadsParams, noise: &Tensor) -> Result<Tensor> {
    params.validate()?;
    c.ensure_same_shape(noise, "CADS noise")?;
    let gamma = params.gamma(t_norm);
    if gamma == 1.0 {
        return Ok(c.clone());
    }
    let (a, b) = (gamma.sqrt(), params.noise_scale * (1.0 - gamma).sqrt());
    let raw = c.zip_map(noise, |c, n| a * c + b * n)?;
    if params.psi == 0.0 || c.numel() == 0 {
        return Ok(raw);
    }
    let (mu_c, sd_c) = mean_std(c.data());
    let (mu_r, sd_r) = mean_std(raw.data());
    if sd_r == 0.0 {
        return Ok(raw);
    }
    let psi = params.psi;
    Ok(raw.map(|v| psi * ((v - mu_r) / sd_r * sd_c + mu_c) + (1.0 - psi) * v))
}
