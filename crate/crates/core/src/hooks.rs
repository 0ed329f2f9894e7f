//! Interception points inside the denoiser's self-attention stack.
//!
//! A perturbed network is the same network run with a populated bus: an
//! attention interceptor swaps the post-softmax map of one layer, a query
//! interceptor swaps the query activations, and skipped blocks are bypassed
//! through their residual path. Observers see every layer's attention map
//! but cannot change it.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-sum tolerance enforced on replacement attention maps.
pub const ROW_SUM_TOL: f64 = 1e-9;

type Interceptor<'a> = Box<dyn FnMut(&Tensor) -> Result<Tensor> + 'a>;
type Observer<'a> = Box<dyn FnMut(usize, &Tensor) + 'a>;

#[derive(Default)]
pub struct AttentionHookBus<'a> {
    attention: BTreeMap<usize, Interceptor<'a>>,
    queries: BTreeMap<usize, Interceptor<'a>>,
    observers: Vec<Observer<'a>>,
    skipped: BTreeSet<usize>,
}

impl<'a> AttentionHookBus<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the post-softmax attention map of `layer`. The map passed to
    /// the closure has shape `(batch, heads, queries, keys)`.
    pub fn on_attention(
        &mut self,
        layer: usize,
        f: impl FnMut(&Tensor) -> Result<Tensor> + 'a,
    ) -> &mut Self {
        self.attention.insert(layer, Box::new(f));
        self
    }

    /// Replaces the query projections of `layer`, shape `(batch * tokens, d_model)`.
    pub fn on_query(
        &mut self,
        layer: usize,
        f: impl FnMut(&Tensor) -> Result<Tensor> + 'a,
    ) -> &mut Self {
        self.queries.insert(layer, Box::new(f));
        self
    }

    pub fn observe(&mut self, f: impl FnMut(usize, &Tensor) + 'a) -> &mut Self {
        self.observers.push(Box::new(f));
        self
    }

    pub fn skip_block(&mut self, layer: usize) -> &mut Self {
        self.skipped.insert(layer);
        self
    }

    /// True when the bus would leave every forward output untouched.
    pub fn is_transparent(&self) -> bool {
        self.attention.is_empty() && self.queries.is_empty() && self.skipped.is_empty()
    }

    pub fn is_skipped(&self, layer: usize) -> bool {
        self.skipped.contains(&layer)
    }

    pub fn has_query_hook(&self, layer: usize) -> bool {
        self.queries.contains_key(&layer)
    }

    pub fn has_attention_hook(&self, layer: usize) -> bool {
        self.attention.contains_key(&layer)
    }

    pub(crate) fn intercept_query(&mut self, layer: usize, q: Tensor) -> Result<Tensor> {
        match self.queries.get_mut(&layer) {
            None => Ok(q),
            Some(f) => {
                let out = f(&q)?;
                if out.shape() != q.shape() {
                    return Err(Error::HookContract {
                        layer,
                        detail: format!(
                            "query replacement has shape {:?}, expected {:?}",
                            out.shape(),
                            q.shape()
                        ),
                    });
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn intercept_attention(&mut self, layer: usize, attn: Tensor) -> Result<Tensor> {
        let out = match self.attention.get_mut(&layer) {
            None => attn,
            Some(f) => {
                let out = f(&attn)?;
                if out.shape() != attn.shape() {
                    return Err(Error::HookContract {
                        layer,
                        detail: format!(
                            "attention replacement has shape {:?}, expected {:?}",
                            out.shape(),
                            attn.shape()
                        ),
                    });
                }
                check_stochastic(&out).map_err(|detail| Error::HookContract { layer, detail })?;
                out
            }
        };
        for obs in &mut self.observers {
            obs(layer, &out);
        }
        Ok(out)
    }
}

fn check_stochastic(t: &Tensor) -> std::result::Result<(), String> {
    for (i, row) in t.rows().enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(format!("row {i} has invalid entry {v}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("row {i} sums to {s}"));
        }
    }
    Ok(())
}
