//! Small diffusion transformer over 8x8 single-channel images.
//!
//! Images are cut into 2x2 patches (16 image tokens). The timestep and the
//! class (or the null class) are embedded, summed, and added to every token.
//! In joint mode each class additionally owns a few learned pseudo-text
//! tokens that are appended after the image tokens, so attention runs over
//! `[image | text]` like an MMDiT block. Every self-attention map passes
//! through an [`AttentionHookBus`] before it is applied to the values.

pub mod checkpoint;
pub mod data;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionLayout, Graph, Var};
use crate::error::{Error, Result};
use crate::hooks::AttentionHookBus;
use crate::optim::ParamSet;
use crate::rng::{stream, NoiseStream};
use crate::tensor::Tensor;

/// What the network regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Eps,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Prediction,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::patch")]
    pub patch: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::mlp_hidden")]
    pub mlp_hidden: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    /// Pseudo-text tokens per class; 0 disables joint attention.
    #[serde(default)]
    pub text_tokens: usize,
    #[serde(default = "defaults::time_features")]
    pub time_features: usize,
}

mod defaults {
    pub fn image_size() -> usize {
        8
    }
    pub fn patch() -> usize {
        2
    }
    pub fn d_model() -> usize {
        32
    }
    pub fn layers() -> usize {
        4
    }
    pub fn heads() -> usize {
        2
    }
    pub fn mlp_hidden() -> usize {
        64
    }
    pub fn num_classes() -> usize {
        2
    }
    pub fn time_features() -> usize {
        16
    }
}

impl ModelConfig {
    pub fn new(mode: Prediction) -> Self {
        Self {
            mode,
            image_size: defaults::image_size(),
            patch: defaults::patch(),
            d_model: defaults::d_model(),
            layers: defaults::layers(),
            heads: defaults::heads(),
            mlp_hidden: defaults::mlp_hidden(),
            num_classes: defaults::num_classes(),
            text_tokens: 0,
            time_features: defaults::time_features(),
        }
    }

    pub fn joint(mut self, text_tokens: usize) -> Self {
        self.text_tokens = text_tokens;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail("image_size must be a positive multiple of patch");
        }
        if self.layers == 0 {
            return fail("layers must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must split evenly into heads");
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return fail("time_features must be a positive even number");
        }
        if self.num_classes == 0 || self.mlp_hidden == 0 {
            return fail("num_classes and mlp_hidden must be positive");
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn image_tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn seq_len(&self) -> usize {
        self.image_tokens() + self.text_tokens
    }

    /// Row index of the null class in the class embedding table.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            layers: self.layers,
            heads: self.heads,
            image_tokens: self.image_tokens(),
            text_tokens: self.text_tokens,
        }
    }
}

/// Shape facts guidance code needs about a denoiser's attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub layers: usize,
    pub heads: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
}

impl TokenLayout {
    pub fn seq_len(&self) -> usize {
        self.image_tokens + self.text_tokens
    }

    pub fn image_grid(&self) -> usize {
        (self.image_tokens as f64).sqrt().round() as usize
    }
}

/// Conditioning embeddings that bypass the class tables (used by condition
/// annealing). `class` is `[batch, d]`; `text` is `[batch * text_tokens, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub class: Tensor,
    pub text: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// One entry per sample; `None` selects the null class.
    pub labels: Vec<Option<usize>>,
    pub embedding: Option<ConditionEmbedding>,
}

impl Conditioning {
    pub fn labels(labels: Vec<Option<usize>>) -> Self {
        Self {
            labels,
            embedding: None,
        }
    }

    pub fn null(batch: usize) -> Self {
        Self::labels(vec![None; batch])
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }
}

/// Anything the sampler can query for a noise or velocity prediction.
pub trait Denoiser {
    fn prediction(&self) -> Prediction;

    fn layout(&self) -> TokenLayout;

    /// Flattened length of one sample.
    fn pixels(&self) -> usize;

    /// Embeddings the labels would select, for callers that want to edit them.
    fn embed_condition(&self, labels: &[Option<usize>]) -> Result<ConditionEmbedding>;

    /// `x_t` is `[batch, pixels]`, `time` holds one normalised time per sample.
    fn predict(
        &self,
        x_t: &Tensor,
        time: &[f64],
        cond: &Conditioning,
        bus: &mut AttentionHookBus<'_>,
    ) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelParams {
    pub config: ModelConfig,
    pub tensors: ParamSet,
}

impl ToyModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = NoiseStream::new(seed, stream::INIT);
        let d = config.d_model;
        let mut tensors = ParamSet::new();
        let mut normal = |shape: Vec<usize>, std: f64| {
            let t = rng.normal_tensor(shape);
            t.scale(std)
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        tensors.insert("patch.w".into(), normal(vec![config.patch_dim(), d], fan(config.patch_dim())));
        tensors.insert("patch.b".into(), Tensor::zeros([d]));
        tensors.insert("pos".into(), normal(vec![config.image_tokens(), d], 0.3));
        tensors.insert("time.w1".into(), normal(vec![config.time_features, d], fan(config.time_features)));
        tensors.insert("time.b1".into(), Tensor::zeros([d]));
        tensors.insert("time.w2".into(), normal(vec![d, d], fan(d)));
        tensors.insert("class".into(), normal(vec![config.num_classes + 1, d], 0.3));
        if config.text_tokens > 0 {
            tensors.insert(
                "text".into(),
                normal(vec![(config.num_classes + 1) * config.text_tokens, d], 0.3),
            );
        }
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                tensors.insert(format!("blocks.{l}.{w}"), normal(vec![d, d], fan(d)));
            }
            tensors.insert(format!("blocks.{l}.mlp.w1"), normal(vec![d, config.mlp_hidden], fan(d)));
            tensors.insert(format!("blocks.{l}.mlp.b1"), Tensor::zeros([config.mlp_hidden]));
            tensors.insert(
                format!("blocks.{l}.mlp.w2"),
                normal(vec![config.mlp_hidden, d], fan(config.mlp_hidden)),
            );
            tensors.insert(format!("blocks.{l}.mlp.b2"), Tensor::zeros([d]));
        }
        tensors.insert("head.w".into(), normal(vec![d, config.patch_dim()], 0.1 * fan(d)));
        tensors.insert("head.b".into(), Tensor::zeros([config.patch_dim()]));
        Ok(Self { config, tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Builds the forward pass on `g` with every parameter as a trainable
    /// leaf. Returns the parameter leaves and the `[batch * image_tokens,
    /// patch_dim]` prediction in token order.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        x_t: &Tensor,
        time: &[f64],
        cond: &Conditioning,
        bus: &mut AttentionHookBus<'_>,
    ) -> Result<(Vec<(String, Var)>, Var)> {
        let cfg = &self.config;
        let batch = cond.batch();
        if x_t.shape() != [batch, cfg.pixels()] {
            return Err(Error::dim(format!(
                "x_t has shape {:?}, expected [{batch}, {}]",
                x_t.shape(),
                cfg.pixels()
            )));
        }
        if time.len() != batch {
            return Err(Error::dim(format!("{} times for batch {batch}", time.len())));
        }
        let n_img = cfg.image_tokens();
        let n_txt = cfg.text_tokens;
        let seq = cfg.seq_len();

        let mut leaves = Vec::with_capacity(self.tensors.len());
        let mut p = std::collections::BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = g.param(t.clone());
            leaves.push((name.clone(), v));
            p.insert(name.as_str(), v);
        }
        let w = |name: &str| -> Result<Var> {
            p.get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
        };

        // image tokens
        let patches = g.constant(patchify(x_t, cfg.image_size, cfg.patch)?);
        let h = g.matmul(patches, w("patch.w")?)?;
        let h = g.add_row(h, w("patch.b")?)?;
        let pos = g.gather_rows(w("pos")?, (0..batch).flat_map(|_| 0..n_img).collect())?;
        let h = g.add(h, pos)?;

        // conditioning vector per sample
        let feats = g.constant(time_features(time, cfg.time_features));
        let te = g.matmul(feats, w("time.w1")?)?;
        let te = g.add_row(te, w("time.b1")?)?;
        let te = g.silu(te);
        let te = g.matmul(te, w("time.w2")?)?;
        let class_rows = self.class_rows(&cond.labels)?;
        let ce = match &cond.embedding {
            Some(e) => {
                if e.class.shape() != [batch, cfg.d_model] {
                    return Err(Error::dim("class embedding override has the wrong shape"));
                }
                g.constant(e.class.clone())
            }
            None => g.gather_rows(w("class")?, class_rows.clone())?,
        };
        let cvec = g.add(te, ce)?;
        let per_img = g.gather_rows(cvec, (0..batch).flat_map(|b| std::iter::repeat_n(b, n_img)).collect())?;
        let h_img = g.add(h, per_img)?;

        let mut h = if n_txt == 0 {
            h_img
        } else {
            let txt = match cond.embedding.as_ref().and_then(|e| e.text.as_ref()) {
                Some(t) => {
                    if t.shape() != [batch * n_txt, cfg.d_model] {
                        return Err(Error::dim("text embedding override has the wrong shape"));
                    }
                    g.constant(t.clone())
                }
                None => g.gather_rows(
                    w("text")?,
                    class_rows
                        .iter()
                        .flat_map(|c| (0..n_txt).map(move |j| c * n_txt + j))
                        .collect(),
                )?,
            };
            let per_txt = g.gather_rows(te, (0..batch).flat_map(|b| std::iter::repeat_n(b, n_txt)).collect())?;
            let txt = g.add(txt, per_txt)?;
            let stacked = g.concat_rows(h_img, txt)?;
            // interleave to [img_b | txt_b] per sample
            let offset = batch * n_img;
            let order = (0..batch)
                .flat_map(|b| {
                    (0..n_img)
                        .map(move |i| b * n_img + i)
                        .chain((0..n_txt).map(move |j| offset + b * n_txt + j))
                })
                .collect();
            g.gather_rows(stacked, order)?
        };

        let layout = AttentionLayout {
            batch,
            seq,
            heads: cfg.heads,
        };
        for l in 0..cfg.layers {
            if bus.is_skipped(l) {
                continue;
            }
            let a = g.layer_norm(h);
            let q = g.matmul(a, w(&format!("blocks.{l}.wq"))?)?;
            let k = g.matmul(a, w(&format!("blocks.{l}.wk"))?)?;
            let v = g.matmul(a, w(&format!("blocks.{l}.wv"))?)?;
            let o = g.attention(q, k, v, layout, l, bus)?;
            let o = g.matmul(o, w(&format!("blocks.{l}.wo"))?)?;
            h = g.add(h, o)?;
            let m = g.layer_norm(h);
            let m = g.matmul(m, w(&format!("blocks.{l}.mlp.w1"))?)?;
            let m = g.add_row(m, w(&format!("blocks.{l}.mlp.b1"))?)?;
            let m = g.silu(m);
            let m = g.matmul(m, w(&format!("blocks.{l}.mlp.w2"))?)?;
            let m = g.add_row(m, w(&format!("blocks.{l}.mlp.b2"))?)?;
            h = g.add(h, m)?;
        }

        let h = g.layer_norm(h);
        let h = if n_txt == 0 {
            h
        } else {
            g.gather_rows(h, (0..batch).flat_map(|b| (0..n_img).map(move |i| b * seq + i)).collect())?
        };
        let out = g.matmul(h, w("head.w")?)?;
        let out = g.add_row(out, w("head.b")?)?;
        Ok((leaves, out))
    }

    fn class_rows(&self, labels: &[Option<usize>]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match l {
                None => Ok(self.config.null_class()),
                Some(c) if *c < self.config.num_classes => Ok(*c),
                Some(c) => Err(Error::config(format!(
                    "class {c} out of range for {} classes",
                    self.config.num_classes
                ))),
            })
            .collect()
    }
}

impl Denoiser for ToyModelParams {
    fn prediction(&self) -> Prediction {
        self.config.mode
    }

    fn layout(&self) -> TokenLayout {
        self.config.layout()
    }

    fn pixels(&self) -> usize {
        self.config.pixels()
    }

    fn embed_condition(&self, labels: &[Option<usize>]) -> Result<ConditionEmbedding> {
        let d = self.config.d_model;
        let rows = self.class_rows(labels)?;
        let table = self.get("class")?;
        let class = Tensor::new(
            [rows.len(), d],
            rows.iter()
                .flat_map(|r| table.data()[r * d..(r + 1) * d].iter().copied())
                .collect(),
        )?;
        let n = self.config.text_tokens;
        let text = if n == 0 {
            None
        } else {
            let table = self.get("text")?;
            Some(Tensor::new(
                [rows.len() * n, d],
                rows.iter()
                    .flat_map(|r| table.data()[r * n * d..(r + 1) * n * d].iter().copied())
                    .collect(),
            )?)
        };
        Ok(ConditionEmbedding { class, text })
    }

    fn predict(
        &self,
        x_t: &Tensor,
        time: &[f64],
        cond: &Conditioning,
        bus: &mut AttentionHookBus<'_>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let (_, out) = self.build_forward(&mut g, x_t, time, cond, bus)?;
        unpatchify(g.value(out), self.config.image_size, self.config.patch)
    }
}

/// Sinusoidal features of normalised time, `[batch, n]`.
pub fn time_features(time: &[f64], n: usize) -> Tensor {
    let half = n / 2;
    let mut data = Vec::with_capacity(time.len() * n);
    for &t in time {
        let scaled = t * 1000.0;
        let freqs = (0..half).map(|k| (-(1000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| scaled * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new([time.len(), n], data).expect("sized above")
}

/// `[batch, side*side]` images to `[batch * tokens, patch*patch]` rows,
/// tokens in raster order and pixels within a patch in raster order.
pub fn patchify(x: &Tensor, side: usize, patch: usize) -> Result<Tensor> {
    let batch = x.shape()[0];
    if x.shape() != [batch, side * side] {
        return Err(Error::dim(format!("patchify: bad image shape {:?}", x.shape())));
    }
    let g = side / patch;
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..batch {
        let img = &x.data()[b * side * side..(b + 1) * side * side];
        for ti in 0..g {
            for tj in 0..g {
                for pi in 0..patch {
                    for pj in 0..patch {
                        out.push(img[(ti * patch + pi) * side + tj * patch + pj]);
                    }
                }
            }
        }
    }
    Tensor::new([batch * g * g, patch * patch], out)
}

pub fn unpatchify(tokens: &Tensor, side: usize, patch: usize) -> Result<Tensor> {
    let g = side / patch;
    let per = g * g;
    if tokens.row_len() != patch * patch || !tokens.numel().is_multiple_of(side * side) {
        return Err(Error::dim(format!("unpatchify: bad token shape {:?}", tokens.shape())));
    }
    let batch = tokens.numel() / (side * side);
    let mut out = vec![0.0; tokens.numel()];
    for b in 0..batch {
        for ti in 0..g {
            for tj in 0..g {
                let row = &tokens.data()[((b * per) + ti * g + tj) * patch * patch..][..patch * patch];
                for pi in 0..patch {
                    for pj in 0..patch {
                        out[b * side * side + (ti * patch + pi) * side + tj * patch + pj] =
                            row[pi * patch + pj];
                    }
                }
            }
        }
    }
    Tensor::new([batch, side * side], out)
}
