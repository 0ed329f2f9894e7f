//! Reverse-mode gradient tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive stores its
//! output and whatever it needs for the backward sweep; [`Graph::backward`]
//! walks the nodes in reverse creation order.

use crate::error::{Error, Result};
use crate::hooks::AttentionHookBus;
use crate::tensor::{gemm, softmax_in_place, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token layout of a fused multi-head attention call: rows of the `q`, `k`,
/// `v` operands are `batch * seq` tokens, columns are `heads * head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Tensor,
        q_used: Tensor,
        hooked: bool,
    },
    MseLoss { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require grad.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Adds a bias vector (shape `[n]`) to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).row_len();
        if self.value(bias).numel() != n {
            return Err(Error::dim(format!(
                "add_row: bias of {} elements for rows of {n}",
                self.value(bias).numel()
            )));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.rows_mut() {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.row_len() as f64;
        let mut inv_std = Vec::new();
        for row in out.rows_mut() {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Row gather from a matrix; rows may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        let (rows, n) = match s.shape() {
            [r, n] => (*r, *n),
            sh => return Err(Error::dim(format!("gather_rows: expected matrix, got {sh:?}"))),
        };
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            if i >= rows {
                return Err(Error::dim(format!("gather_rows: row {i} out of {rows}")));
            }
            data.extend_from_slice(&s.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new([idx.len(), n], data)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::GatherRows { src, idx }, rg))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        match (va.shape(), vb.shape()) {
            ([ma, na], [mb, nb]) if na == nb => {
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                let out = Tensor::new([ma + mb, *na], data)?;
                let rg = self.rg(a) || self.rg(b);
                Ok(self.push(out, Op::ConcatRows(a, b), rg))
            }
            (sa, sb) => Err(Error::dim(format!("concat_rows: {sa:?} and {sb:?}"))),
        }
    }

    /// Fused scaled-dot-product multi-head self-attention. The attention map
    /// of shape `(batch, heads, seq, seq)` is offered to `bus` before it is
    /// applied to the values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        layer: usize,
        bus: &mut AttentionHookBus<'_>,
    ) -> Result<Var> {
        let AttentionLayout { batch, seq, heads } = layout;
        let d = self.value(q).row_len();
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            if self.value(var).shape() != [batch * seq, d] {
                return Err(Error::dim(format!(
                    "attention {name}: shape {:?}, expected [{}, {d}]",
                    self.value(var).shape(),
                    batch * seq
                )));
            }
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::dim(format!("{d} channels cannot split into {heads} heads")));
        }
        let dh = d / heads;
        let c = 1.0 / (dh as f64).sqrt();

        let q_hooked = bus.has_query_hook(layer);
        let q_used = bus.intercept_query(layer, self.value(q).clone())?;
        let kv = self.value(k);
        let mut probs = Tensor::zeros([batch, heads, seq, seq]);
        {
            let p = probs.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    let slot = &mut p[(b * heads + h) * seq * seq..][..seq * seq];
                    strided_gemm(
                        seq,
                        dh,
                        seq,
                        c,
                        Strided::new(q_used.data(), off, d, 1),
                        Strided::new(kv.data(), off, 1, d),
                        0.0,
                        slot,
                        0,
                        seq,
                    );
                    for row in slot.chunks_mut(seq) {
                        softmax_in_place(row);
                    }
                }
            }
        }
        let attn_hooked = bus.has_attention_hook(layer);
        let probs = bus.intercept_attention(layer, probs)?;

        let vv = self.value(v);
        let mut out = Tensor::zeros([batch * seq, d]);
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                strided_gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    Strided::new(probs.data(), (b * heads + h) * seq * seq, seq, 1),
                    Strided::new(vv.data(), off, d, 1),
                    0.0,
                    out.data_mut(),
                    off,
                    d,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                q_used,
                hooked: q_hooked || attn_hooked,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target; returns a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.ensure_same_shape(&target, "mse_loss")?;
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, target }, rg))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients for the caller.
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if self.rg(*a) {
                        let mut ga = Tensor::zeros([m, k]);
                        gemm(m, n, k, g.data(), false, vb.data(), true, ga.data_mut(), 0.0);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Tensor::zeros([k, n]);
                        gemm(k, m, n, va.data(), true, g.data(), false, gb.data_mut(), 0.0);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let vb = self.value(*bias);
                        let mut gb = vec![0.0; vb.numel()];
                        for row in g.rows() {
                            for (acc, x) in gb.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::new(vb.shape().to_vec(), gb)?);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, *a, g.scale(*k));
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gy, x| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gy * s * (1.0 + x * (1.0 - s))
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.row_len();
                    let mut gx = Tensor::zeros(y.shape().to_vec());
                    for (r, ((gxr, yr), gr)) in gx
                        .rows_mut()
                        .zip(y.rows())
                        .zip(g.rows())
                        .enumerate()
                    {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for i in 0..n {
                            gxr[i] = inv_std[r] * (gr[i] - mean_g - yr[i] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { src, idx } => {
                    let vs = self.value(*src);
                    let n = vs.row_len();
                    let mut gs = Tensor::zeros(vs.shape().to_vec());
                    for (row, &i) in g.rows().zip(idx) {
                        for (acc, x) in gs.data_mut()[i * n..(i + 1) * n].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).numel();
                    let (da, db) = g.data().split_at(split);
                    if self.rg(*a) {
                        let ga = Tensor::new(self.value(*a).shape().to_vec(), da.to_vec())?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = Tensor::new(self.value(*b).shape().to_vec(), db.to_vec())?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                    q_used,
                    hooked,
                } => {
                    if *hooked {
                        return Err(Error::config(
                            "backward through a hooked attention layer is not supported",
                        ));
                    }
                    let (gq, gk, gv) = attention_backward(
                        *layout,
                        &g,
                        probs,
                        q_used,
                        self.value(*k),
                        self.value(*v),
                    );
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::MseLoss { pred, target } => {
                    let vp = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / vp.numel() as f64;
                    let gp = vp.zip_map(target, |p, t| scale * (p - t))?;
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients(grads))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn attention_backward(
    layout: AttentionLayout,
    g_out: &Tensor,
    probs: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttentionLayout { batch, seq, heads } = layout;
    let d = q.row_len();
    let dh = d / heads;
    let c = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape().to_vec());
    let mut gk = Tensor::zeros(k.shape().to_vec());
    let mut gv = Tensor::zeros(v.shape().to_vec());
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            // dV = P^T dO
            strided_gemm(
                seq,
                seq,
                dh,
                1.0,
                Strided::new(probs.data(), p_off, 1, seq),
                Strided::new(g_out.data(), off, d, 1),
                0.0,
                gv.data_mut(),
                off,
                d,
            );
            // dP = dO V^T
            strided_gemm(
                seq,
                dh,
                seq,
                1.0,
                Strided::new(g_out.data(), off, d, 1),
                Strided::new(v.data(), off, 1, d),
                0.0,
                &mut dp,
                0,
                seq,
            );
            // dS = c * P (dP - rowdot(dP, P))
            let p = &probs.data()[p_off..p_off + seq * seq];
            for (dpr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in dpr.iter_mut().zip(pr) {
                    *x = c * pv * (*x - dot);
                }
            }
            // dQ = dS K, dK = dS^T Q
            strided_gemm(
                seq,
                seq,
                dh,
                1.0,
                Strided::new(&dp, 0, seq, 1),
                Strided::new(k.data(), off, d, 1),
                0.0,
                gq.data_mut(),
                off,
                d,
            );
            strided_gemm(
                seq,
                seq,
                dh,
                1.0,
                Strided::new(&dp, 0, 1, seq),
                Strided::new(q.data(), off, d, 1),
                0.0,
                gk.data_mut(),
                off,
                d,
            );
        }
    }
    (gq, gk, gv)
}

struct Strided<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Strided<'a> {
    fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Self {
            data,
            offset,
            rs,
            cs,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c[c_off..] = alpha * a * b + beta * c`, `a` is `m x k`, `b` is `k x n`,
/// and `c` has row stride `c_rs` and unit column stride.
#[allow(clippy::too_many_arguments)]
fn strided_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Strided<'_>,
    b: Strided<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    c_rs: usize,
) {
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        assert!(c_off + (m - 1) * c_rs + n - 1 < c.len(), "gemm output out of bounds");
    }
    // SAFETY: every view was bounds-checked against its backing slice above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            c_rs as isize,
            1,
        );
    }
}
