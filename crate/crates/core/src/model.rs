//! Non-autoregressive encoder-decoder with the iterative coverage layer on top
//! of the decoder.
//!
//! The decoder input is a row of `<unk>` embeddings plus sinusoidal positions.
//! The bottom `L - 1` decoder layers are standard (non-causal) decoder layers;
//! the top layer is iterated `K` times, each iteration biasing its
//! inter-attention towards source tokens that earlier target positions left
//! uncovered in the previous iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::config::ModelConfig;
use crate::data::Padded;
use crate::error::{Error, Result};
use crate::layers::{embed_with_positions, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;
use crate::vocab::UNK;

/// Coverage layer weights. `lambda` scales the `1 - C` attention bias.
#[derive(Clone, Debug)]
pub struct CoverageLayer {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub norm_inter: Option<LayerNorm>,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
    pub lambda: ParamId,
}

#[derive(Clone, Debug)]
pub enum TopLayer {
    Coverage(CoverageLayer),
    /// The ablation baseline: one more standard decoder layer, applied once.
    Plain(DecoderLayer),
}

/// Encoder states and length logits for a padded source batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[B, S, D]`
    pub states: Var,
    /// `[B, 2 * radius + 1]`
    pub length_logits: Var,
    pub src_mask: Vec<f64>,
    pub src_lengths: Vec<usize>,
}

/// Values of one coverage iteration for a whole batch: `h` is `[B, T, D]`,
/// `attention` and `coverage` are `[B, T, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageIterationState {
    pub k: usize,
    pub h: Tensor,
    pub attention: Tensor,
    pub coverage: Tensor,
}

pub struct NatOutput {
    /// `[B, T, V]`
    pub logits: Var,
    pub encoder: EncoderOutput,
    pub tgt_mask: Vec<f64>,
    pub states: Option<Vec<CoverageIterationState>>,
}

#[derive(Clone, Debug)]
pub struct NatModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub top: TopLayer,
    pub length: Linear,
    /// Source-to-target latent map of the sentence-level agreement loss.
    pub sca_ws: ParamId,
}

impl NatModel {
    /// Builds a freshly initialised model; identical configs give identical parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let (d, hid, h, s) = (config.d_model, config.d_hidden, config.n_heads, config.init_scale);
        let embedding = ps.add_uniform("embedding", &[config.vocab_size, d], s, &mut rng)?;
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&mut ps, &format!("encoder.layer{l}"), d, hid, h, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.n_layers - 1)
            .map(|l| DecoderLayer::new(&mut ps, &format!("decoder.layer{l}"), d, hid, h, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let top_name = format!("decoder.layer{}", config.n_layers - 1);
        let top = if config.use_tcir {
            TopLayer::Coverage(CoverageLayer {
                self_attn: MultiHeadAttention::new(&mut ps, &format!("{top_name}.self_attn"), d, h, s, &mut rng)?,
                norm_self: LayerNorm::new(&mut ps, &format!("{top_name}.norm_self"), d)?,
                norm_inter: if config.coverage_inter_residual {
                    Some(LayerNorm::new(&mut ps, &format!("{top_name}.norm_inter"), d)?)
                } else {
                    None
                },
                ffn: FeedForward::new(&mut ps, &format!("{top_name}.ffn"), d, hid, s, &mut rng)?,
                norm_ffn: LayerNorm::new(&mut ps, &format!("{top_name}.norm_ffn"), d)?,
                lambda: ps.add_full(format!("{top_name}.lambda"), &[1], config.lambda_init)?,
            })
        } else {
            TopLayer::Plain(DecoderLayer::new(&mut ps, &top_name, d, hid, h, s, &mut rng)?)
        };
        let length = Linear::new(&mut ps, "length", d, config.length_buckets(), s, &mut rng)?;
        let sca_ws = ps.add_uniform("sca.ws", &[d, d], s, &mut rng)?;
        Ok(NatModel {
            config,
            params: ps,
            embedding,
            encoder,
            decoder,
            top,
            length,
            sca_ws,
        })
    }

    pub fn lambda(&self) -> Option<f64> {
        match &self.top {
            TopLayer::Coverage(c) => Some(self.params.value(c.lambda).item()),
            TopLayer::Plain(_) => None,
        }
    }

    pub fn lambda_id(&self) -> Option<ParamId> {
        match &self.top {
            TopLayer::Coverage(c) => Some(c.lambda),
            TopLayer::Plain(_) => None,
        }
    }

    fn dropout(&self) -> f64 {
        self.config.dropout
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamSet, src: &Padded) -> Result<EncoderOutput> {
        if src.lengths.iter().any(|&l| l == 0) {
            return Err(Error::Contract("cannot encode an all-pad source row".into()));
        }
        let table = g.param(ps, self.embedding);
        let mut x = embed_with_positions(g, table, &src.ids, src.rows, src.width, self.dropout())?;
        for layer in &self.encoder {
            x = layer.forward(g, ps, x, &src.mask, self.dropout())?;
        }
        let pooled = g.masked_mean(x, &src.mask)?;
        let length_logits = self.length.forward(g, ps, pooled)?;
        Ok(EncoderOutput {
            states: x,
            length_logits,
            src_mask: src.mask.clone(),
            src_lengths: src.lengths.clone(),
        })
    }

    /// Target length for a source of length `n` from one row of length logits.
    /// Ties go to the lowest bucket.
    pub fn predict_length(&self, length_logits: &[f64], n: usize) -> usize {
        predict_length(length_logits, n, self.config.length_radius, self.config.max_len)
    }

    /// Runs the bottom `L - 1` decoder layers over `<unk>` inputs.
    ///
    /// Returns `H⁰` `[B, T, D]` and the head-averaged inter-attention `A⁰`
    /// `[B, T, S]` of the last of those layers.
    pub fn decode_hidden(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        enc: &EncoderOutput,
        tgt_mask: &[f64],
        width: usize,
    ) -> Result<(Var, Var)> {
        if width == 0 || width > self.config.max_len {
            return Err(Error::Contract(format!(
                "target width {width} outside 1..={}",
                self.config.max_len
            )));
        }
        let rows = enc.src_lengths.len();
        let table = g.param(ps, self.embedding);
        let ids = vec![UNK; rows * width];
        let mut h = embed_with_positions(g, table, &ids, rows, width, self.dropout())?;
        let mut attn = None;
        for layer in &self.decoder {
            let (out, w) = layer.forward(g, ps, h, AttnMask::keys(tgt_mask), enc.states, &enc.src_mask, self.dropout())?;
            h = out;
            attn = Some(w);
        }
        let a0 = g.mean_over_axis(attn.expect("at least one bottom decoder layer"), 1)?;
        Ok((h, a0))
    }

    /// One coverage iteration: self-attention over `h_prev`, coverage-biased
    /// inter-attention over the encoder states, then the FFN.
    ///
    /// Returns `(Hᵏ, Aᵏ)`.
    pub fn coverage_iteration(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        h_prev: Var,
        coverage: Var,
        enc: &EncoderOutput,
        tgt_mask: &[f64],
    ) -> Result<(Var, Var)> {
        let layer = self.coverage_layer()?;
        let (sa, _) = layer.self_attn.forward(g, ps, h_prev, h_prev, AttnMask::keys(tgt_mask))?;
        let h_hat = crate::layers::residual_norm(g, ps, &layer.norm_self, h_prev, sa, self.dropout())?;
        let a = self.coverage_attention(g, ps, h_hat, coverage, enc)?;
        let ctx = g.matmul(a, enc.states)?;
        let x = match &layer.norm_inter {
            Some(norm) => crate::layers::residual_norm(g, ps, norm, h_hat, ctx, self.dropout())?,
            None => ctx,
        };
        let f = layer.ffn.forward(g, ps, x)?;
        let h = crate::layers::residual_norm(g, ps, &layer.norm_ffn, x, f, self.dropout())?;
        Ok((h, a))
    }

    /// `softmax(Ĥ E_encᵀ / √d + λ (1 - C))` with padded source keys masked.
    pub fn coverage_attention(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        h_hat: Var,
        coverage: Var,
        enc: &EncoderOutput,
    ) -> Result<Var> {
        let layer = self.coverage_layer()?;
        let scores = g.matmul_bt(h_hat, enc.states)?;
        let scores = g.scale(scores, 1.0 / (self.config.d_model as f64).sqrt());
        let neg = g.scale(coverage, -1.0);
        let bias = g.add_scalar(neg, 1.0);
        let lambda = g.param(ps, layer.lambda);
        let bias = g.scale_by(bias, lambda)?;
        let biased = g.add(scores, bias)?;
        g.softmax_masked(biased, AttnMask::keys(&enc.src_mask))
    }

    fn coverage_layer(&self) -> Result<&CoverageLayer> {
        match &self.top {
            TopLayer::Coverage(c) => Ok(c),
            TopLayer::Plain(_) => Err(Error::Contract("model was built without the coverage layer".into())),
        }
    }

    /// Chains `K` coverage iterations starting from `(H⁰, A⁰)`.
    ///
    /// With `record`, every iteration's values are returned. In debug builds
    /// the coverage invariants are checked on every iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn run_tcir(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        h0: Var,
        a0: Var,
        enc: &EncoderOutput,
        tgt_mask: &[f64],
        k: usize,
        record: bool,
    ) -> Result<(Var, Option<Vec<CoverageIterationState>>)> {
        if k == 0 {
            return Err(Error::Contract("the coverage layer needs at least one iteration".into()));
        }
        let mut h = h0;
        let mut a = a0;
        let mut states = record.then(Vec::new);
        for iter in 1..=k {
            let c = coverage_vector(g, a)?;
            let (h_next, a_next) = self.coverage_iteration(g, ps, h, c, enc, tgt_mask)?;
            if cfg!(debug_assertions) {
                check_coverage_invariants(g.value(a_next), g.value(c), &enc.src_mask, 1e-9)?;
            }
            if let Some(s) = states.as_mut() {
                s.push(CoverageIterationState {
                    k: iter,
                    h: g.value(h_next).clone(),
                    attention: g.value(a_next).clone(),
                    coverage: g.value(c).clone(),
                });
            }
            h = h_next;
            a = a_next;
        }
        Ok((h, states))
    }

    /// Logits `[B, T, V]` for target lengths `tgt_lengths` (padded to their maximum).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        src: &Padded,
        tgt_lengths: &[usize],
        k: usize,
        record: bool,
    ) -> Result<NatOutput> {
        let encoder = self.encode(g, ps, src)?;
        self.forward_from(g, ps, encoder, tgt_lengths, k, record)
    }

    /// Decoder half of [`NatModel::forward`], reusing an encoded batch.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        encoder: EncoderOutput,
        tgt_lengths: &[usize],
        k: usize,
        record: bool,
    ) -> Result<NatOutput> {
        if tgt_lengths.len() != encoder.src_lengths.len() || tgt_lengths.iter().any(|&t| t == 0) {
            return Err(Error::Contract(format!(
                "need one positive target length per source row, got {tgt_lengths:?}"
            )));
        }
        let width = *tgt_lengths.iter().max().expect("non-empty batch");
        let tgt_mask = Padded::mask_for_lengths(tgt_lengths, width);
        let (h0, a0) = self.decode_hidden(g, ps, &encoder, &tgt_mask, width)?;
        let (h, states) = match &self.top {
            TopLayer::Coverage(_) => self.run_tcir(g, ps, h0, a0, &encoder, &tgt_mask, k, record)?,
            TopLayer::Plain(layer) => {
                let (h, _) = layer.forward(g, ps, h0, AttnMask::keys(&tgt_mask), encoder.states, &encoder.src_mask, self.dropout())?;
                (h, None)
            }
        };
        let table = g.param(ps, self.embedding);
        let logits = g.matmul_bt(h, table)?;
        Ok(NatOutput {
            logits,
            encoder,
            tgt_mask,
            states,
        })
    }
}

/// `T = n + (argmax - radius)`, clamped to `[1, max_len]`.
pub fn predict_length(length_logits: &[f64], n: usize, radius: usize, max_len: usize) -> usize {
    let best = argmax(length_logits);
    let t = n as i64 + best as i64 - radius as i64;
    t.clamp(1, max_len.max(1) as i64) as usize
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `C[t, i] = min(Σ_{t' < t} A[t', i], 1)` along axis 1 of `[B, T, S]`.
pub fn coverage_vector(g: &mut Graph, attention: Var) -> Result<Var> {
    let acc = g.cumsum_exclusive(attention, 1)?;
    Ok(g.min_clamp1(acc))
}

/// Checks the per-iteration invariants on `[B, T, S]` attention and coverage:
/// attention rows sum to 1 within `tol`, coverage lies in `[0, 1]`, starts at
/// zero and never decreases along the target axis.
pub fn check_coverage_invariants(attention: &Tensor, coverage: &Tensor, src_mask: &[f64], tol: f64) -> Result<()> {
    let s = attention.shape();
    if s.len() != 3 || coverage.shape() != s || src_mask.len() != s[0] * s[2] {
        return Err(Error::Dimension(format!(
            "coverage check on {:?} / {:?} with {} mask entries",
            s,
            coverage.shape(),
            src_mask.len()
        )));
    }
    let (b, t, n) = (s[0], s[1], s[2]);
    let (a, c) = (attention.data(), coverage.data());
    let fail = |what: String| Err(Error::Numeric(format!("coverage invariant violated: {what}")));
    for bi in 0..b {
        for ti in 0..t {
            let row = &a[(bi * t + ti) * n..(bi * t + ti + 1) * n];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return fail(format!("attention row ({bi}, {ti}) sums to {sum}"));
            }
            for i in 0..n {
                if src_mask[bi * n + i] == 0.0 && row[i] != 0.0 {
                    return fail(format!("padded key ({bi}, {i}) has weight {}", row[i]));
                }
                let v = c[(bi * t + ti) * n + i];
                if !(0.0..=1.0).contains(&v) {
                    return fail(format!("coverage ({bi}, {ti}, {i}) = {v}"));
                }
                if ti == 0 && v != 0.0 {
                    return fail(format!("first coverage row ({bi}, {i}) = {v}"));
                }
                if ti > 0 && v < c[(bi * t + ti - 1) * n + i] {
                    return fail(format!("coverage decreases at ({bi}, {ti}, {i})"));
                }
            }
        }
    }
    Ok(())
}
