//! Training objectives.

use std::cell::Cell;

use crate::autodiff::{Graph, Var};
use crate::data::{Batch, Padded};
use crate::error::Result;
use crate::model::NatModel;
use crate::params::ParamSet;

/// Mean negative log-likelihood of `targets` over positions where `mask` is 1.
pub fn mle_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
    g.cross_entropy(logits, targets, Some(mask))
}

/// Gold bucket of the length offset `t - n`, clamped to `[0, 2 * radius]`.
/// The flag reports whether clamping was needed.
pub fn length_bucket(n: usize, t: usize, radius: usize) -> (usize, bool) {
    let raw = t as i64 - n as i64 + radius as i64;
    let clamped = raw.clamp(0, 2 * radius as i64);
    (clamped as usize, clamped != raw)
}

/// Cross-entropy of the length logits `[B, 2r + 1]` against the gold offsets.
///
/// Offsets outside `[-radius, radius]` use the edge bucket and increment `clamped`.
pub fn length_loss(
    g: &mut Graph,
    length_logits: Var,
    src_lengths: &[usize],
    tgt_lengths: &[usize],
    radius: usize,
    clamped: &Cell<usize>,
) -> Result<Var> {
    let targets: Vec<usize> = src_lengths
        .iter()
        .zip(tgt_lengths)
        .map(|(&n, &t)| {
            let (b, c) = length_bucket(n, t, radius);
            if c {
                clamped.set(clamped.get() + 1);
            }
            b
        })
        .collect();
    g.cross_entropy(length_logits, &targets, None)
}

/// Sentence-level agreement between source and expected translation.
///
/// The source side is `mean_i ReLU(e(x_i) W_s)` over raw word embeddings; the
/// hypothesis side is `mean_t softmax(logits_t) W_e`. The loss is the batch mean
/// of the Euclidean distance between them, divided by `sqrt(d)`.
pub fn sca_loss(g: &mut Graph, table: Var, ws: Var, src: &Padded, logits: Var, tgt_mask: &[f64]) -> Result<Var> {
    let d = g.shape(table)[1];
    let e_src = g.embedding(table, &src.ids, &[src.rows, src.width])?;
    let proj = g.matmul(e_src, ws)?;
    let proj = g.relu(proj);
    let src_mean = g.masked_mean(proj, &src.mask)?;
    let p = g.softmax(logits)?;
    let e_hyp = g.matmul(p, table)?;
    let hyp_mean = g.masked_mean(e_hyp, tgt_mask)?;
    let dist = g.l2_distance(src_mean, hyp_mean)?;
    let mean = g.mean_all(dist);
    Ok(g.scale(mean, 1.0 / (d as f64).sqrt()))
}

/// Scalar loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub mle: Var,
    pub length: Var,
    pub sca: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> (f64, f64, Option<f64>, f64) {
        (
            g.value(self.mle).item(),
            g.value(self.length).item(),
            self.sca.map(|v| g.value(v).item()),
            g.value(self.total).item(),
        )
    }
}

/// `L_mle + alpha * L_length`, plus `beta * L_coverage` when `beta` is given.
///
/// Target lengths are the reference lengths.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    g: &mut Graph,
    model: &NatModel,
    ps: &ParamSet,
    batch: &Batch,
    alpha: f64,
    beta: Option<f64>,
    k: usize,
    clamped: &Cell<usize>,
) -> Result<LossTerms> {
    let out = model.forward(g, ps, &batch.src, &batch.tgt.lengths, k, false)?;
    let mle = mle_loss(g, out.logits, &batch.tgt.ids, &batch.tgt.mask)?;
    let length = length_loss(
        g,
        out.encoder.length_logits,
        &batch.src.lengths,
        &batch.tgt.lengths,
        model.config.length_radius,
        clamped,
    )?;
    let weighted = g.scale(length, alpha);
    let mut total = g.add(mle, weighted)?;
    let mut sca = None;
    if let Some(beta) = beta {
        let table = g.param(ps, model.embedding);
        let ws = g.param(ps, model.sca_ws);
        let s = sca_loss(g, table, ws, &batch.src, out.logits, &out.tgt_mask)?;
        let weighted = g.scale(s, beta);
        total = g.add(total, weighted)?;
        sca = Some(s);
    }
    Ok(LossTerms { mle, length, sca, total })
}

/// `L_mle + alpha * L_length`.
pub fn pretrain_objective(
    g: &mut Graph,
    model: &NatModel,
    ps: &ParamSet,
    batch: &Batch,
    alpha: f64,
    k: usize,
    clamped: &Cell<usize>,
) -> Result<LossTerms> {
    objective(g, model, ps, batch, alpha, None, k, clamped)
}

/// `L_mle + alpha * L_length + beta * L_coverage`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_objective(
    g: &mut Graph,
    model: &NatModel,
    ps: &ParamSet,
    batch: &Batch,
    alpha: f64,
    beta: f64,
    k: usize,
    clamped: &Cell<usize>,
) -> Result<LossTerms> {
    objective(g, model, ps, batch, alpha, Some(beta), k, clamped)
}
