//! Noise schedules, forward corruption, and the two deterministic reverse
//! integrators: DDIM with eta = 0 and Euler on the rectified-flow ODE.
//!
//! Sampler steps are indexed `t = T, T-1, ..., 1`; step `t` moves the latent
//! from level `t` to level `t - 1`, and level 0 is clean data. For the flow
//! schedule, level `t` sits at noise fraction `sigma = t / T` on the linear
//! path `x = (1 - sigma) x0 + sigma x1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Discrete variance-preserving schedule, epsilon prediction.
    Vp,
    /// Linear interpolation path, velocity prediction.
    Flow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    /// `alpha_bar[t]` for `t = 0..=T` (VP only; empty for flow).
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Discretisation of the continuous VP SDE `dx = -beta(s)/2 x ds + sqrt(beta(s)) dw`
    /// with `beta(s)` linear from 0.1 to 20 on `s in [0, 1]`, sampled at
    /// `s = t / T`. Gives `alpha_bar(s) = exp(-(0.1 s + 9.95 s^2))`, so the
    /// terminal signal level is near `e^-10` for any step count.
    pub fn vp(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let (b0, b1) = (0.1, 20.0);
        let alpha_bar = (0..=steps)
            .map(|t| {
                let s = t as f64 / steps as f64;
                (-(b0 * s + 0.5 * (b1 - b0) * s * s)).exp()
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn vp_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Explicit VP schedule; `alpha_bar[0]` is the clean level.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::config("alpha_bar needs at least two levels"));
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-9 {
            return Err(Error::config("alpha_bar[0] must be 1"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|a| *a < 0.0) {
            return Err(Error::config("alpha_bar must be non-negative and strictly decreasing"));
        }
        Ok(Self {
            kind: ScheduleKind::Vp,
            steps: alpha_bar.len() - 1,
            alpha_bar,
        })
    }

    /// Uniform flow grid with `steps` Euler steps over `steps + 1` nodes.
    pub fn flow(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(Self {
            kind: ScheduleKind::Flow,
            steps,
            alpha_bar: Vec::new(),
        })
    }

    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Vp => Self::vp(steps),
            ScheduleKind::Flow => Self::flow(steps),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        match self.kind {
            ScheduleKind::Vp => Ok(self.alpha_bar[t]),
            ScheduleKind::Flow => Err(Error::config("alpha_bar is only defined for VP schedules")),
        }
    }

    /// Noise fraction of level `t` on the flow grid.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_level(t)?;
        Ok(t as f64 / self.steps as f64)
    }

    /// Normalised time fed to the denoiser: `t / T` for both schedule kinds.
    pub fn model_time(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    fn check_level(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Domain(format!(
                "level {t} outside schedule 0..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Sampler step indices in the order they run.
    pub fn sampler_steps(&self) -> impl Iterator<Item = usize> {
        (1..=self.steps).rev()
    }

    /// One reverse step from level `t` to `t - 1` given the model prediction.
    pub fn reverse_step(&self, x: &Tensor, prediction: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::Domain("cannot step below level 0".into()));
        }
        match self.kind {
            ScheduleKind::Vp => ddim_step(x, prediction, t, t - 1, self),
            ScheduleKind::Flow => {
                self.check_level(t)?;
                flow_euler_step(x, prediction, -1.0 / self.steps as f64)
            }
        }
    }
}

/// Corrupts `x0` to level `t` with the caller's `noise`.
pub fn forward_corrupt(
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    x0.ensure_same_shape(noise, "forward_corrupt")?;
    match schedule.kind {
        ScheduleKind::Vp => {
            let ab = schedule.alpha_bar(t)?;
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            x0.zip_map(noise, |x, e| a * x + s * e)
        }
        ScheduleKind::Flow => flow_interpolate(x0, noise, schedule.sigma(t)?),
    }
}

/// Point at continuous time `sigma` on the linear path from `x0` to `x1`.
pub fn flow_interpolate(x0: &Tensor, x1: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("flow time {sigma} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| (1.0 - sigma) * a + sigma * b)
}

/// Deterministic DDIM update (eta = 0) from level `t` to `t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if schedule.kind != ScheduleKind::Vp {
        return Err(Error::config("ddim_step needs a VP schedule"));
    }
    if t <= t_prev {
        return Err(Error::Domain(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if ab_t == 0.0 {
        return Err(Error::SingularSchedule(t));
    }
    let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(eps_hat, |x, e| {
        let x0 = (x - sn_t * e) / sa_t;
        sa_p * x0 + sn_p * e
    })
}

pub fn flow_euler_step(x: &Tensor, v_hat: &Tensor, dt: f64) -> Result<Tensor> {
    x.zip_map(v_hat, |a, v| a + dt * v)
}
