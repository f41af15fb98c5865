use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::Scalar;
use crate::{NnError, Result};

use super::{Builder, Linear, Mlp};

const LN_EPS: f64 = 1e-5;

/// Row layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: b.param(&format!("{name}.gain"), &[dim], Init::Constant(1.0))?,
            bias: b.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = cx.graph.layer_norm(x, LN_EPS);
        let g = cx.p(self.gain);
        let b = cx.p(self.bias);
        let y = cx.graph.mul_row(y, g)?;
        cx.graph.add_bias(y, b)
    }
}

/// Mean over `n` consecutive token rows: `[batch * n, d] -> [batch, d]`.
pub fn mean_tokens<T: Scalar>(cx: &mut Ctx<T>, tokens: Var, n: usize, d: usize) -> Result<Var> {
    let rows = cx.graph.value(tokens).len() / d;
    if !rows.is_multiple_of(n) {
        return Err(NnError::Shape(format!(
            "{} token rows not divisible by {}",
            rows, n
        )));
    }
    let batch = rows / n;
    let flat = cx.graph.reshape(tokens, &[batch, n * d])?;
    let mut acc = cx.graph.slice_cols(flat, 0, d)?;
    for i in 1..n {
        let t = cx.graph.slice_cols(flat, i * d, d)?;
        acc = cx.graph.add(acc, t)?;
    }
    Ok(cx.graph.scale(acc, 1.0 / n as f64))
}

/// Multi-head scaled dot-product attention. The output projection has no
/// bias, so a zeroed value projection yields an exactly zero output.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Shape(format!(
                "model width {} not divisible by {} heads",
                dim, heads
            )));
        }
        Ok(Self {
            query: Linear::new(b, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(b, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(b, &format!("{name}.v"), dim, dim)?,
            out: Linear::with_init(b, &format!("{name}.o"), dim, dim, Init::HeUniform, false)?,
            heads,
            dim,
        })
    }

    /// `q_in` is `[batch * nq, d]`, `kv_in` is `[batch * nk, d]`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        q_in: Var,
        kv_in: Var,
        nq: usize,
        nk: usize,
    ) -> Result<Var> {
        let d = self.dim;
        let q_rows = cx.graph.value(q_in).len() / d;
        let kv_rows = cx.graph.value(kv_in).len() / d;
        if !q_rows.is_multiple_of(nq) || !kv_rows.is_multiple_of(nk) || q_rows / nq != kv_rows / nk
        {
            return Err(NnError::Shape(format!(
                "attention batch mismatch: {} query rows / {} vs {} key rows / {}",
                q_rows, nq, kv_rows, nk
            )));
        }
        let batch = q_rows / nq;
        let q = self.query.forward(cx, q_in)?;
        let k = self.key.forward(cx, kv_in)?;
        let v = self.value.forward(cx, kv_in)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.graph.slice_cols(q, h * dh, dh)?;
            let kh = cx.graph.slice_cols(k, h * dh, dh)?;
            let vh = cx.graph.slice_cols(v, h * dh, dh)?;
            let qh = cx.graph.reshape(qh, &[batch, nq, dh])?;
            let kh = cx.graph.reshape(kh, &[batch, nk, dh])?;
            let vh = cx.graph.reshape(vh, &[batch, nk, dh])?;
            let scores = cx.graph.bmm(qh, kh, true)?;
            let scores = cx.graph.scale(scores, scale);
            let weights = cx.graph.softmax(scores);
            let ctx = cx.graph.bmm(weights, vh, false)?;
            outs.push(cx.graph.reshape(ctx, &[batch * nq, dh])?);
        }
        let cat = cx.graph.concat_cols(&outs)?;
        self.out.forward(cx, cat)
    }

    /// Softmax weights of the first head, `[batch, nq, nk]`. Diagnostics only.
    pub fn weights<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        q_in: Var,
        kv_in: Var,
        nq: usize,
        nk: usize,
    ) -> Result<Var> {
        let d = self.dim;
        let batch = cx.graph.value(q_in).len() / d / nq;
        let dh = d / self.heads;
        let q = self.query.forward(cx, q_in)?;
        let k = self.key.forward(cx, kv_in)?;
        let qh = cx.graph.slice_cols(q, 0, dh)?;
        let kh = cx.graph.slice_cols(k, 0, dh)?;
        let qh = cx.graph.reshape(qh, &[batch, nq, dh])?;
        let kh = cx.graph.reshape(kh, &[batch, nk, dh])?;
        let scores = cx.graph.bmm(qh, kh, true)?;
        let scores = cx.graph.scale(scores, 1.0 / (dh as f64).sqrt());
        Ok(cx.graph.softmax(scores))
    }
}

/// Pre-norm transformer encoder layer: attention + residual, MLP + residual.
/// No positional encoding, so it is permutation equivariant over tokens.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub dim: usize,
}

impl SelfAttentionBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim)?,
            ffn: Mlp::new(b, &format!("{name}.ffn"), &[dim, 2 * dim, dim])?,
            dim,
        })
    }

    /// `tokens` is `[batch * n, d]`, rows grouped per batch element.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, tokens: Var, n: usize) -> Result<Var> {
        let width = *cx.graph.shape(tokens).last().unwrap_or(&0);
        if width != self.dim {
            return Err(NnError::Shape(format!(
                "tokens of width {} for block {}",
                width, self.dim
            )));
        }
        let normed = self.norm1.forward(cx, tokens)?;
        let a = self.attn.forward(cx, normed, normed, n, n)?;
        let x1 = cx.graph.add(tokens, a)?;
        let normed = self.norm2.forward(cx, x1)?;
        let f = self.ffn.forward(cx, normed)?;
        cx.graph.add(x1, f)
    }
}

/// Cross-attention whose Add & Norm residual carries only the key/value
/// side: `LN(mean(kv) + Attn(q, kv))`. The query steers the attention
/// weights but never enters the skip connection.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl CrossAttentionBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
            dim,
        })
    }

    /// `q_src` is `[batch, d]` (one query per element), `kv_src` is `[batch * m, d]`.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        q_src: Var,
        kv_src: Var,
        m: usize,
    ) -> Result<Var> {
        let qw = *cx.graph.shape(q_src).last().unwrap_or(&0);
        let kw = *cx.graph.shape(kv_src).last().unwrap_or(&0);
        if qw != self.dim || kw != self.dim {
            return Err(NnError::Shape(format!(
                "cross attention widths q={} kv={} for block {}",
                qw, kw, self.dim
            )));
        }
        let a = self.attn.forward(cx, q_src, kv_src, 1, m)?;
        let visual = mean_tokens(cx, kv_src, m, self.dim)?;
        let x = cx.graph.add(visual, a)?;
        self.norm.forward(cx, x)
    }
}
