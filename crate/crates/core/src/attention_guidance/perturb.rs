//! Attention and input perturbations used by the baseline guidance rules.

use crate::error::{Error, Result};
use crate::model::TokenLayout;
use crate::tensor::Tensor;

/// Every query attends only to itself.
pub fn pag_identity(attn: &Tensor) -> Result<Tensor> {
    let s = attn.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::dim(format!(
            "identity attention needs square maps, got {s:?}"
        )));
    }
    let n = s[s.len() - 1];
    Ok(Tensor::from_fn(s.to_vec(), |i| {
        if (i / n) % n == i % n {
            1.0
        } else {
            0.0
        }
    }))
}

/// Replaces every image-token query of each sample with their channel-wise
/// mean. `q` is `(batch * seq, d_model)`; text-token queries pass through.
pub fn seg_query_mean(q: &Tensor, layout: &TokenLayout) -> Result<Tensor> {
    let seq = layout.seq_len();
    let s = q.shape();
    if s.len() != 2 || seq == 0 || !s[0].is_multiple_of(seq) {
        return Err(Error::dim(format!("query shape {s:?} does not tile into {seq} tokens")));
    }
    let d = s[1];
    let mut out = q.clone();
    for b in 0..s[0] / seq {
        let rows = b * seq..b * seq + layout.image_tokens;
        let mut mean = vec![0.0; d];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&q.data()[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        let n = layout.image_tokens as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        for r in rows {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&mean);
        }
    }
    Ok(out)
}

/// Blur and masking parameters for self-attention guidance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SagBlur {
    pub threshold: f64,
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for SagBlur {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            kernel: 9,
            sigma: 1.0,
        }
    }
}

/// Pixel mask `(batch, side * side)` of image tokens whose attention mass,
/// summed over image queries and averaged over heads, exceeds `threshold`.
/// Token decisions are upscaled to pixels by nearest neighbour.
pub fn sag_mask(attn: &Tensor, layout: &TokenLayout, side: usize, threshold: f64) -> Result<Tensor> {
    let s = attn.shape();
    let seq = layout.seq_len();
    let n_img = layout.image_tokens;
    let grid = layout.image_grid();
    if s.len() != 4 || s[2] != seq || s[3] != seq || grid * grid != n_img {
        return Err(Error::dim(format!("attention shape {s:?} does not match the token layout")));
    }
    if grid == 0 || !side.is_multiple_of(grid) {
        return Err(Error::dim(format!("{side}px images do not tile a {grid}x{grid} token grid")));
    }
    let (batch, heads) = (s[0], s[1]);
    let patch = side / grid;
    let mut mask = Vec::with_capacity(batch * side * side);
    for b in 0..batch {
        let mut mass = vec![0.0; n_img];
        for h in 0..heads {
            for q in 0..n_img {
                let row = ((b * heads + h) * seq + q) * seq;
                for (m, v) in mass.iter_mut().zip(&attn.data()[row..row + n_img]) {
                    *m += v;
                }
            }
        }
        for r in 0..side {
            for c in 0..side {
                let tok = (r / patch) * grid + c / patch;
                mask.push(if mass[tok] / heads as f64 > threshold { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new([batch, side * side], mask)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) || !(sigma > 0.0) {
        return Err(Error::config(format!(
            "blur kernel needs odd size and positive sigma, got {size} and {sigma}"
        )));
    }
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-0.5 * (x / sigma).powi(2)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // repeated reflection covers kernels wider than the image
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of `(batch, side * side)` images with reflected borders.
pub fn gaussian_blur(x: &Tensor, side: usize, size: usize, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_kernel(size, sigma)?;
    let s = x.shape();
    if s.len() != 2 || s[1] != side * side {
        return Err(Error::dim(format!("expected (batch, {}) images, got {s:?}", side * side)));
    }
    if side == 1 {
        return Ok(x.clone());
    }
    let half = (size / 2) as isize;
    let mut out = x.clone();
    let mut tmp = vec![0.0; side * side];
    for img in out.rows_mut() {
        for r in 0..side {
            for c in 0..side {
                tmp[r * side + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * img[r * side + reflect(c as isize + k as isize - half, side)])
                    .sum();
            }
        }
        for r in 0..side {
            for c in 0..side {
                img[r * side + c] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[reflect(r as isize + k as isize - half, side) * side + c])
                    .sum();
            }
        }
    }
    Ok(out)
}

/// Swaps masked pixels of `x` for their blurred values.
pub fn sag_degrade(x: &Tensor, mask: &Tensor, blur: &SagBlur) -> Result<Tensor> {
    x.ensure_same_shape(mask, "SAG mask")?;
    if mask.data().iter().all(|m| *m == 0.0) {
        return Ok(x.clone());
    }
    let side = (x.shape()[1] as f64).sqrt().round() as usize;
    let blurred = gaussian_blur(x, side, blur.kernel, blur.sigma)?;
    let mut out = x.clone();
    for ((o, b), m) in out.data_mut().iter_mut().zip(blurred.data()).zip(mask.data()) {
        if *m != 0.0 {
            *o = *b;
        }
    }
    Ok(out)
}
