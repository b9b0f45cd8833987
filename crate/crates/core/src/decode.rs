//! Parallel decoding, length-parallel decoding with teacher rescoring, and
//! corpus-level evaluation.

use std::time::Instant;

use crate::autodiff::Graph;
use crate::data::Padded;
use crate::error::{Error, Result};
use crate::metrics::{postprocess_dedup, EvalReport, RepeatCount};
use crate::model::{argmax, CoverageIterationState, NatModel};
use crate::teacher::Teacher;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub raw: Vec<usize>,
    pub tokens: Vec<usize>,
    pub removed: usize,
    pub predicted_len: usize,
    /// Probability of the chosen token at each raw position.
    pub probs: Vec<f64>,
    pub rescore: Option<f64>,
    /// Per-iteration `[T, n]` attention and coverage, when requested.
    pub coverage: Option<Vec<SentenceCoverage>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceCoverage {
    pub k: usize,
    pub attention: Tensor,
    pub coverage: Tensor,
}

/// Picks the argmax token (lowest id on ties) at every position.
pub fn argmax_rows(logits: &[f64], vocab: usize) -> Vec<(usize, f64)> {
    logits
        .chunks(vocab)
        .map(|row| {
            let best = argmax(row);
            let max = row[best];
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            (best, 1.0 / z)
        })
        .collect()
}

fn slice_state(state: &CoverageIterationState, row: usize, t: usize, n: usize) -> Result<SentenceCoverage> {
    let s = state.attention.shape();
    let (width, src_width) = (s[1], s[2]);
    let cut = |x: &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(t * n);
        for ti in 0..t {
            let base = (row * width + ti) * src_width;
            data.extend_from_slice(&x.data()[base..base + n]);
        }
        Tensor::new(&[t, n], data)
    };
    Ok(SentenceCoverage {
        k: state.k,
        attention: cut(&state.attention)?,
        coverage: cut(&state.coverage)?,
    })
}

/// Decodes each source row at the given target lengths in one batch.
fn decode_at_lengths(
    model: &NatModel,
    srcs: &[Vec<usize>],
    lengths: Option<&[usize]>,
    k_dec: usize,
    record: bool,
) -> Result<Vec<DecodeResult>> {
    if k_dec == 0 {
        return Err(Error::Contract("k_dec must be at least 1".into()));
    }
    let src = Padded::new(srcs)?;
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, &model.params, &src)?;
    let buckets = model.config.length_buckets();
    let predicted: Vec<usize> = g
        .value(enc.length_logits)
        .data()
        .chunks(buckets)
        .zip(&src.lengths)
        .map(|(row, &n)| model.predict_length(row, n))
        .collect();
    let lengths = lengths.map(<[usize]>::to_vec).unwrap_or_else(|| predicted.clone());
    let out = model.forward_from(&mut g, &model.params, enc, &lengths, k_dec, record)?;
    let v = model.config.vocab_size;
    let width = *lengths.iter().max().expect("non-empty batch");
    let picks = argmax_rows(g.value(out.logits).data(), v);
    (0..srcs.len())
        .map(|r| {
            let t = lengths[r];
            let row = &picks[r * width..r * width + t];
            let raw: Vec<usize> = row.iter().map(|p| p.0).collect();
            let (tokens, removed) = postprocess_dedup(&raw);
            let coverage = match &out.states {
                Some(states) => Some(
                    states
                        .iter()
                        .map(|s| slice_state(s, r, t, src.lengths[r]))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            Ok(DecodeResult {
                raw,
                tokens,
                removed,
                predicted_len: predicted[r],
                probs: row.iter().map(|p| p.1).collect(),
                rescore: None,
                coverage,
            })
        })
        .collect()
}

/// Predicts each length and takes the argmax at every position at once.
pub fn greedy_parallel_decode(model: &NatModel, srcs: &[Vec<usize>], k_dec: usize) -> Result<Vec<DecodeResult>> {
    decode_at_lengths(model, srcs, None, k_dec, false)
}

/// Like [`greedy_parallel_decode`], also returning every coverage iteration.
pub fn decode_with_coverage(model: &NatModel, srcs: &[Vec<usize>], k_dec: usize) -> Result<Vec<DecodeResult>> {
    decode_at_lengths(model, srcs, None, k_dec, true)
}

/// Candidate lengths `max(1, t - radius) ..= t + radius`, capped at `max_len`.
pub fn lpd_lengths(predicted: usize, radius: usize, max_len: usize) -> Vec<usize> {
    let lo = predicted.saturating_sub(radius).max(1);
    let hi = (predicted + radius).min(max_len).max(lo);
    (lo..=hi).collect()
}

/// Length-parallel decoding: greedy decodes at every candidate length around
/// the predicted one, reranked by the teacher. Ties prefer the length closest
/// to the prediction, then the shorter one. Radius 0 is plain greedy decoding.
pub fn lpd_decode(
    model: &NatModel,
    teacher: Option<&Teacher>,
    src: &[usize],
    k_dec: usize,
    radius: usize,
) -> Result<DecodeResult> {
    if radius == 0 {
        return Ok(greedy_parallel_decode(model, &[src.to_vec()], k_dec)?.remove(0));
    }
    let teacher = teacher.ok_or_else(|| Error::Config("length-parallel decoding with radius > 0 needs a teacher".into()))?;
    let first = greedy_parallel_decode(model, &[src.to_vec()], k_dec)?.remove(0);
    let predicted = first.predicted_len;
    let lengths = lpd_lengths(predicted, radius, model.config.max_len);
    let srcs = vec![src.to_vec(); lengths.len()];
    let mut cands = decode_at_lengths(model, &srcs, Some(&lengths), k_dec, false)?;
    let texts: Vec<Vec<usize>> = cands.iter().map(|c| c.tokens.clone()).collect();
    let scores = teacher.rescore_batch(src, &texts)?;
    let mut best = 0;
    for i in 1..cands.len() {
        let (a, b) = (scores[i], scores[best]);
        let dist = |l: usize| l.abs_diff(predicted);
        let better = a > b
            || (a == b && (dist(lengths[i]), lengths[i]) < (dist(lengths[best]), lengths[best]));
        if better {
            best = i;
        }
    }
    let mut out = cands.swap_remove(best);
    out.predicted_len = predicted;
    out.rescore = Some(scores[best]);
    Ok(out)
}

/// Decodes a corpus in order, `batch_rows` sentences per batch, or one by one
/// through [`lpd_decode`] when `radius > 0`.
pub fn decode_corpus(
    model: &NatModel,
    teacher: Option<&Teacher>,
    srcs: &[Vec<usize>],
    k_dec: usize,
    radius: usize,
    batch_rows: usize,
) -> Result<Vec<DecodeResult>> {
    if radius > 0 {
        return srcs.iter().map(|s| lpd_decode(model, teacher, s, k_dec, radius)).collect();
    }
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(batch_rows.max(1)) {
        out.extend(greedy_parallel_decode(model, chunk, k_dec)?);
    }
    Ok(out)
}

/// Mean wall-clock milliseconds per sentence, decoding one sentence at a time.
pub fn mean_latency_ms(
    model: &NatModel,
    teacher: Option<&Teacher>,
    srcs: &[Vec<usize>],
    k_dec: usize,
    radius: usize,
) -> Result<f64> {
    if srcs.is_empty() {
        return Err(Error::Data("latency of an empty set".into()));
    }
    let start = Instant::now();
    for s in srcs {
        lpd_decode(model, teacher, s, k_dec, radius)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1000.0 / srcs.len() as f64)
}

/// Scores decodes against references.
pub fn evaluate_decodes(
    decodes: &[DecodeResult],
    srcs: &[Vec<usize>],
    refs: &[Vec<usize>],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let words = |ids: &[usize]| -> Vec<String> { ids.iter().map(|&i| vocab.token(i).to_string()).collect() };
    let hyps: Vec<Vec<String>> = decodes.iter().map(|d| words(&d.tokens)).collect();
    let refs: Vec<Vec<String>> = refs.iter().map(|r| words(r)).collect();
    let src_lengths: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let counts: Vec<RepeatCount> = decodes
        .iter()
        .zip(&src_lengths)
        .map(|(d, &n)| RepeatCount {
            removed: d.removed,
            raw_len: d.raw.len(),
            src_len: n,
        })
        .collect();
    EvalReport::build(&hyps, &refs, &src_lengths, &counts)
}

/// Corpus BLEU of greedy parallel decoding.
pub fn corpus_bleu(model: &NatModel, srcs: &[Vec<usize>], refs: &[Vec<usize>], k_dec: usize, batch_rows: usize) -> Result<f64> {
    let decodes = decode_corpus(model, None, srcs, k_dec, 0, batch_rows)?;
    let hyps: Vec<Vec<usize>> = decodes.into_iter().map(|d| d.tokens).collect();
    crate::metrics::bleu(&hyps, refs)
}

/// CSV with header `iter,t,i,A,C`, values at six decimals.
pub fn coverage_dump_csv(coverage: &[SentenceCoverage]) -> String {
    let mut s = String::from("iter,t,i,A,C\n");
    for it in coverage {
        let shape = it.attention.shape();
        for t in 0..shape[0] {
            for i in 0..shape[1] {
                s.push_str(&format!(
                    "{},{},{},{:.6},{:.6}\n",
                    it.k,
                    t,
                    i,
                    it.attention.get(&[t, i]),
                    it.coverage.get(&[t, i])
                ));
            }
        }
    }
    s
}
