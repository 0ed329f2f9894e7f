//! Denoiser training: epsilon regression on the VP schedule or velocity
//! regression on the linear flow path, with label dropout to the null class.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::{Conditioning, ModelConfig, Prediction, ToyModelParams};
use crate::autodiff::Graph;
use crate::diffusion::{flow_interpolate, forward_corrupt, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hooks::AttentionHookBus;
use crate::model::patchify;
use crate::optim::{adam_step, AdamConfig, AdamState, ParamSet};
use crate::rng::{stream, NoiseStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Probability of replacing a label with the null class.
    #[serde(default = "defaults::label_dropout")]
    pub label_dropout: f64,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Discrete levels of the VP schedule used for epsilon training.
    #[serde(default = "defaults::vp_steps")]
    pub vp_steps: usize,
    #[serde(default = "defaults::held_out")]
    pub held_out: usize,
}

mod defaults {
    pub fn batch() -> usize {
        16
    }
    pub fn lr() -> f64 {
        2e-3
    }
    pub fn label_dropout() -> f64 {
        0.1
    }
    pub fn eval_every() -> usize {
        250
    }
    pub fn vp_steps() -> usize {
        50
    }
    pub fn held_out() -> usize {
        64
    }
}

impl TrainConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch: defaults::batch(),
            lr: defaults::lr(),
            label_dropout: defaults::label_dropout(),
            eval_every: defaults::eval_every(),
            vp_steps: defaults::vp_steps(),
            held_out: defaults::held_out(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.held_out == 0 {
            return Err(Error::config("batch and held_out must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::config("label_dropout must lie in [0, 1]"));
        }
        if self.eval_every == 0 || self.vp_steps == 0 {
            return Err(Error::config("eval_every and vp_steps must be positive"));
        }
        Ok(())
    }

    /// Warmup then cosine decay to a tenth of the peak rate.
    fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.steps / 20).clamp(1, 200);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (0.1 + 0.9 * cos)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// `(step, held-out loss)`; the first row is the initialisation.
    pub curve: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "step,loss")?;
        for (s, l) in &self.curve {
            writeln!(w, "{s},{l:?}")?;
        }
        Ok(())
    }
}

/// A fixed batch of inputs and regression targets.
struct Batch {
    x_t: Tensor,
    time: Vec<f64>,
    cond: Conditioning,
    target: Tensor,
}

struct BatchMaker<'a> {
    dataset: &'a Dataset,
    mode: Prediction,
    schedule: NoiseSchedule,
    side: usize,
    patch: usize,
}

impl BatchMaker<'_> {
    fn make(
        &self,
        picks: &mut NoiseStream,
        noise: &mut NoiseStream,
        batch: usize,
        dropout: f64,
    ) -> Result<Batch> {
        let idx: Vec<usize> = (0..batch).map(|_| picks.below(self.dataset.len())).collect();
        let (x0, labels) = self.dataset.batch(&idx)?;
        let labels = labels
            .into_iter()
            .map(|l| if picks.bernoulli(dropout) { None } else { Some(l) })
            .collect();
        let eps = noise.normal_tensor(x0.shape().to_vec());
        let pixels = x0.shape()[1];
        let mut x_t = Vec::with_capacity(x0.numel());
        let mut target = Vec::with_capacity(x0.numel());
        let mut time = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = |t: &Tensor| Tensor::new([pixels], t.data()[b * pixels..(b + 1) * pixels].to_vec());
            let (x0b, eb) = (row(&x0)?, row(&eps)?);
            match self.mode {
                Prediction::Eps => {
                    let level = 1 + noise.below(self.schedule.steps());
                    x_t.extend(forward_corrupt(&x0b, level, &eb, &self.schedule)?.into_data());
                    target.extend_from_slice(eb.data());
                    time.push(self.schedule.model_time(level));
                }
                Prediction::Velocity => {
                    let sigma = noise.uniform();
                    x_t.extend(flow_interpolate(&x0b, &eb, sigma)?.into_data());
                    target.extend(eb.sub(&x0b)?.into_data());
                    time.push(sigma);
                }
            }
        }
        let target = Tensor::new([batch, pixels], target)?;
        Ok(Batch {
            x_t: Tensor::new([batch, pixels], x_t)?,
            time,
            cond: Conditioning::labels(labels),
            target: patchify(&target, self.side, self.patch)?,
        })
    }
}

fn batch_loss(params: &ToyModelParams, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let (_, out) = params.build_forward(
        &mut g,
        &batch.x_t,
        &batch.time,
        &batch.cond,
        &mut AttentionHookBus::new(),
    )?;
    let loss = g.mse_loss(out, batch.target.clone())?;
    Ok(g.value(loss).data()[0])
}

/// Trains a freshly initialised model.
pub fn train(
    dataset: &Dataset,
    model: ModelConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ToyModelParams, TrainReport)> {
    let init = ToyModelParams::init(model, seed)?;
    train_from(init, dataset, config, seed)
}

pub fn train_from(
    mut params: ToyModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ToyModelParams, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let maker = BatchMaker {
        dataset,
        mode: params.config.mode,
        schedule: NoiseSchedule::vp(config.vp_steps)?,
        side: params.config.image_size,
        patch: params.config.patch,
    };
    let held_out = maker.make(
        &mut NoiseStream::new(seed, stream::HELD_OUT),
        &mut NoiseStream::new(seed ^ 0x5eed, stream::HELD_OUT),
        config.held_out,
        0.0,
    )?;
    let mut report = TrainReport::default();
    report.curve.push((0, batch_loss(&params, &held_out)?));

    let mut picks = NoiseStream::new(seed, stream::TRAIN_BATCH);
    let mut noise = NoiseStream::new(seed, stream::TRAIN_NOISE);
    let mut adam = AdamState::new(AdamConfig::default());
    for step in 0..config.steps {
        let batch = maker.make(&mut picks, &mut noise, config.batch, config.label_dropout)?;
        let mut g = Graph::new();
        let (leaves, out) = params.build_forward(
            &mut g,
            &batch.x_t,
            &batch.time,
            &batch.cond,
            &mut AttentionHookBus::new(),
        )?;
        let loss = g.mse_loss(out, batch.target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::TrainingDivergence {
                step,
                detail: format!("loss is {value}"),
            });
        }
        let grads = g.backward(loss)?;
        let named: ParamSet = leaves
            .into_iter()
            .filter_map(|(name, v)| grads.get(v).map(|t| (name, t.clone())))
            .collect();
        adam_step(&mut params.tensors, &named, &mut adam, config.lr_at(step)).map_err(|e| {
            match e {
                Error::NonFiniteGradient(p) => Error::TrainingDivergence {
                    step,
                    detail: format!("non-finite gradient for `{p}`"),
                },
                other => other,
            }
        })?;
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            report.curve.push((done, batch_loss(&params, &held_out)?));
        }
    }
    Ok((params, report))
}
