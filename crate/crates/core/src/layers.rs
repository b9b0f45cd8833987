//! Transformer building blocks shared by the NAT student and the AT teacher.
//!
//! All sublayers use post-norm residuals: `LayerNorm(x + Dropout(sublayer(x)))`.

use rand::Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: ps.add_uniform(format!("{name}.weight"), &[d_in, d_out], scale, rng)?,
            bias: ps.add_full(format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: ps.add_full(format!("{name}.gain"), &[d], 1.0)?,
            bias: ps.add_full(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// `max(0, x W1 + b1) W2 + b2`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(ps, &format!("{name}.inner"), d, hidden, scale, rng)?,
            outer: Linear::new(ps, &format!("{name}.outer"), hidden, d, scale, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, ps, x)?;
        let h = g.relu(h);
        self.outer.forward(g, ps, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, heads: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::new(ps, &format!("{name}.q"), d, d, scale, rng)?,
            key: Linear::new(ps, &format!("{name}.k"), d, d, scale, rng)?,
            value: Linear::new(ps, &format!("{name}.v"), d, d, scale, rng)?,
            output: Linear::new(ps, &format!("{name}.o"), d, d, scale, rng)?,
            heads,
        })
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let x = g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        g.swap_axes(x, 1, 2)
    }

    /// Returns the attended output `[B, T, D]` and the weights `[B, heads, T, S]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        queries: Var,
        memory: Var,
        mask: AttnMask<'_>,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, ps, queries)?;
        let k = self.key.forward(g, ps, memory)?;
        let v = self.value.forward(g, ps, memory)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let head_dim = g.shape(q)[3];
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let weights = g.softmax_masked(scores, mask)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.swap_axes(ctx, 1, 2)?;
        let s = g.shape(queries).to_vec();
        let ctx = g.reshape(ctx, &s)?;
        let out = self.output.forward(g, ps, ctx)?;
        Ok((out, weights))
    }
}

/// `LayerNorm(x + Dropout(y))`
pub fn residual_norm(g: &mut Graph, ps: &ParamSet, norm: &LayerNorm, x: Var, y: Var, dropout: f64) -> Result<Var> {
    let y = g.dropout(y, dropout);
    let sum = g.add(x, y)?;
    norm.forward(g, ps, sum)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, heads: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, heads, scale, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, hidden, scale, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var, src_mask: &[f64], dropout: f64) -> Result<Var> {
        let (a, _) = self.self_attn.forward(g, ps, x, x, AttnMask::keys(src_mask))?;
        let x = residual_norm(g, ps, &self.norm1, x, a, dropout)?;
        let f = self.ffn.forward(g, ps, x)?;
        residual_norm(g, ps, &self.norm2, x, f, dropout)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, heads: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, heads, scale, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, heads, scale, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d)?,
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, hidden, scale, rng)?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), d)?,
        })
    }

    /// Returns the layer output and the inter-attention weights `[B, heads, T, S]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: Var,
        self_mask: AttnMask<'_>,
        memory: Var,
        src_mask: &[f64],
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let (a, _) = self.self_attn.forward(g, ps, x, x, self_mask)?;
        let x = residual_norm(g, ps, &self.norm1, x, a, dropout)?;
        let (c, weights) = self.cross_attn.forward(g, ps, x, memory, AttnMask::keys(src_mask))?;
        let x = residual_norm(g, ps, &self.norm2, x, c, dropout)?;
        let f = self.ffn.forward(g, ps, x)?;
        Ok((residual_norm(g, ps, &self.norm3, x, f, dropout)?, weights))
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("positive extents")
}

/// `sqrt(d) * table[ids] + positions`, shaped `[rows, width, d]`.
pub fn embed_with_positions(
    g: &mut Graph,
    table: Var,
    ids: &[usize],
    rows: usize,
    width: usize,
    dropout: f64,
) -> Result<Var> {
    let d = g.shape(table)[1];
    let e = g.embedding(table, ids, &[rows, width])?;
    let e = g.scale(e, (d as f64).sqrt());
    let pos = g.constant(sinusoidal_positions(width, d));
    let x = g.add(e, pos)?;
    Ok(g.dropout(x, dropout))
}
