//! Convex blending of attention maps and the EMAG / EMAG-I partition of joint
//! attention into image-to-image and image-to-text blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::ROW_SUM_TOL;
use crate::model::TokenLayout;
use crate::tensor::Tensor;

/// `(1 - lambda) * attn + lambda * ema`, with exact endpoints.
pub fn blend_replace(attn: &Tensor, ema: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("blend weight must lie in [0, 1], got {lambda}")));
    }
    attn.ensure_same_shape(ema, "attention blend")?;
    if lambda == 0.0 {
        return Ok(attn.clone());
    }
    if lambda == 1.0 {
        return Ok(ema.clone());
    }
    attn.zip_map(ema, |a, e| (1.0 - lambda) * a + lambda * e)
}

/// Clamps negatives to zero and rescales a row to `target` mass when it has
/// drifted by more than the row-sum tolerance.
fn repair_row(row: &mut [f64], target: f64) {
    let mut sum = 0.0;
    for v in row.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
        sum += *v;
    }
    if (sum - target).abs() > ROW_SUM_TOL && sum > 0.0 {
        let k = target / sum;
        for v in row.iter_mut() {
            *v *= k;
        }
    }
}

/// Repairs every row of a stochastic tensor in place.
pub fn make_stochastic(t: &mut Tensor) {
    for row in t.rows_mut() {
        repair_row(row, 1.0);
    }
}

/// Which part of an image-query row the EMA perturbation touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Image queries against all keys (EMAG).
    FullRow,
    /// Image queries against image keys only (EMAG-I).
    ImageOnly,
}

fn check_layout(attn: &Tensor, layout: &TokenLayout) -> Result<(usize, usize)> {
    let s = attn.shape();
    let seq = layout.seq_len();
    if s.len() != 4 || s[2] != seq || s[3] != seq {
        return Err(Error::dim(format!(
            "attention shape {s:?} does not match {} image + {} text tokens",
            layout.image_tokens, layout.text_tokens
        )));
    }
    Ok((s[0] * s[1], seq))
}

/// Copies the region `mode` perturbs out of `(B, H, S, S)` attention, giving
/// `(B, H, image_tokens, width)`.
pub fn extract_region(attn: &Tensor, layout: &TokenLayout, mode: Partition) -> Result<Tensor> {
    let (blocks, seq) = check_layout(attn, layout)?;
    let n_img = layout.image_tokens;
    let width = region_width(layout, mode);
    let mut out = Vec::with_capacity(blocks * n_img * width);
    for blk in 0..blocks {
        for q in 0..n_img {
            let start = (blk * seq + q) * seq;
            out.extend_from_slice(&attn.data()[start..start + width]);
        }
    }
    let s = attn.shape();
    Tensor::new([s[0], s[1], n_img, width], out)
}

fn region_width(layout: &TokenLayout, mode: Partition) -> usize {
    match mode {
        Partition::FullRow => layout.seq_len(),
        Partition::ImageOnly => layout.image_tokens,
    }
}

/// Runs `op` on the region `mode` selects and writes the result back.
///
/// Text-query rows are never touched. In `ImageOnly` mode the image-key block
/// is rescaled to its original mass so the image-to-text columns, which are
/// copied through bit for bit, still complete a stochastic row. With no text
/// tokens both modes take the same path.
pub fn emag_partition_apply(
    attn: &Tensor,
    layout: &TokenLayout,
    mode: Partition,
    op: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mode = if layout.text_tokens == 0 {
        Partition::FullRow
    } else {
        mode
    };
    let region = extract_region(attn, layout, mode)?;
    let replaced = op(&region)?;
    replaced.ensure_same_shape(&region, "partition op output")?;
    let (blocks, seq) = check_layout(attn, layout)?;
    let n_img = layout.image_tokens;
    let width = region_width(layout, mode);
    let mut out = attn.clone();
    for blk in 0..blocks {
        for q in 0..n_img {
            let src = (blk * n_img + q) * width;
            let dst = (blk * seq + q) * seq;
            let new = &replaced.data()[src..src + width];
            let row = &mut out.data_mut()[dst..dst + width];
            row.copy_from_slice(new);
            let target = match mode {
                Partition::FullRow => 1.0,
                Partition::ImageOnly => region.data()[src..src + width].iter().sum(),
            };
            repair_row(row, target);
        }
    }
    Ok(out)
}
