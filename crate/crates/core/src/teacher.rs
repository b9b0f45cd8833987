//! Autoregressive teacher: a causal encoder-decoder used for sequence-level
//! distillation and for rescoring length-parallel candidates.
//!
//! Decoder inputs are `<s> y₁ … y_T` and outputs `y₁ … y_T </s>`. Sequence
//! scores are the summed log-probabilities of the output tokens including the
//! end marker, divided by the number of scored tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Graph, Var};
use crate::config::TeacherConfig;
use crate::data::{batch_by_tokens, Batch, Padded, SentencePair, TextCorpus};
use crate::error::{Error, Result};
use crate::layers::{embed_with_positions, DecoderLayer, EncoderLayer};
use crate::optim::{lr_schedule, Adam};
use crate::params::{ParamId, ParamSet};
use crate::vocab::{Vocabulary, BOS, EOS, PAD, UNK};

#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub params: ParamSet,
    pub embedding: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

/// A decoded sequence and its length-normalised log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Teacher {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let (d, hid, h, s) = (config.d_model, config.d_hidden, config.n_heads, config.init_scale);
        let embedding = ps.add_uniform("embedding", &[config.vocab_size, d], s, &mut rng)?;
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&mut ps, &format!("encoder.layer{l}"), d, hid, h, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.n_layers)
            .map(|l| DecoderLayer::new(&mut ps, &format!("decoder.layer{l}"), d, hid, h, s, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Teacher {
            config,
            params: ps,
            embedding,
            encoder,
            decoder,
        })
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamSet, src: &Padded) -> Result<Var> {
        let table = g.param(ps, self.embedding);
        let mut x = embed_with_positions(g, table, &src.ids, src.rows, src.width, self.config.dropout)?;
        for layer in &self.encoder {
            x = layer.forward(g, ps, x, &src.mask, self.config.dropout)?;
        }
        Ok(x)
    }

    /// Logits `[B, t, V]` for decoder inputs `prefix` under a causal mask.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        memory: Var,
        src_mask: &[f64],
        prefix: &Padded,
    ) -> Result<Var> {
        let table = g.param(ps, self.embedding);
        let mut h = embed_with_positions(g, table, &prefix.ids, prefix.rows, prefix.width, self.config.dropout)?;
        let mask = AttnMask {
            keys: Some(&prefix.mask),
            causal: true,
        };
        for layer in &self.decoder {
            h = layer.forward(g, ps, h, mask, memory, src_mask, self.config.dropout)?.0;
        }
        g.matmul_bt(h, table)
    }

    /// Mean token cross-entropy of a batch with `<s>` / `</s>` framing.
    pub fn loss(&self, g: &mut Graph, ps: &ParamSet, batch: &Batch) -> Result<Var> {
        let memory = self.encode(g, ps, &batch.src)?;
        let (inputs, outputs) = frame(&batch.tgt);
        let input = Padded::new(&inputs)?;
        let output = Padded::new(&outputs)?;
        let logits = self.decode_logits(g, ps, memory, &batch.src.mask, &input)?;
        g.cross_entropy(logits, &output.ids, Some(&output.mask))
    }

    fn max_decode_len(&self, src_len: usize) -> usize {
        (2 * src_len + 10).min(self.config.max_len)
    }

    /// Next-token log-probabilities after each prefix (all prefixes share a length).
    fn next_log_probs(&self, g: &mut Graph, memory: Var, src_mask: &[f64], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let rows = prefixes.len();
        let mem = g.concat(&vec![memory; rows], 0)?;
        let mask: Vec<f64> = src_mask.iter().copied().cycle().take(src_mask.len() * rows).collect();
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let input = Padded::new(&inputs)?;
        let logits = self.decode_logits(g, &self.params, mem, &mask, &input)?;
        let v = self.config.vocab_size;
        let w = input.width;
        let data = g.value(logits).data();
        Ok((0..rows)
            .map(|r| {
                let row = &data[(r * w + w - 1) * v..(r * w + w) * v];
                let mut lp = log_softmax(row);
                for special in [PAD, UNK, BOS] {
                    lp[special] = f64::NEG_INFINITY;
                }
                if prefixes[r].is_empty() {
                    lp[EOS] = f64::NEG_INFINITY;
                }
                lp
            })
            .collect())
    }

    fn encode_single(&self, g: &mut Graph, src: &[usize]) -> Result<(Var, Vec<f64>)> {
        let padded = Padded::new(&[src])?;
        let memory = self.encode(g, &self.params, &padded)?;
        Ok((memory, padded.mask))
    }

    /// Length-normalised beam search. Beam 1 reproduces [`Teacher::greedy_decode`].
    pub fn beam_decode(&self, src: &[usize], beam: usize) -> Result<Hypothesis> {
        let mut g = Graph::inference();
        let (memory, mask) = self.encode_single(&mut g, src)?;
        beam_search(
            |prefixes| self.next_log_probs(&mut g, memory, &mask, prefixes),
            beam,
            self.max_decode_len(src.len()),
            EOS,
        )
    }

    /// Stepwise argmax until `</s>` or the length limit.
    pub fn greedy_decode(&self, src: &[usize]) -> Result<Hypothesis> {
        let mut g = Graph::inference();
        let (memory, mask) = self.encode_single(&mut g, src)?;
        let mut tokens = Vec::new();
        let mut total = 0.0;
        for _ in 0..self.max_decode_len(src.len()) {
            let lp = self.next_log_probs(&mut g, memory, &mask, std::slice::from_ref(&tokens))?.remove(0);
            let best = crate::model::argmax(&lp);
            total += lp[best];
            if best == EOS {
                return Ok(Hypothesis {
                    score: total / (tokens.len() + 1) as f64,
                    tokens,
                });
            }
            tokens.push(best);
        }
        Ok(Hypothesis {
            score: total / tokens.len() as f64,
            tokens,
        })
    }

    /// Normalised log-probability of each candidate (plus `</s>`) given `src`.
    pub fn rescore_batch(&self, src: &[usize], candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
        if candidates.iter().any(Vec::is_empty) || candidates.is_empty() {
            return Err(Error::Contract("cannot rescore an empty candidate".into()));
        }
        let mut g = Graph::inference();
        let rows = candidates.len();
        let srcs = vec![src.to_vec(); rows];
        let padded = Padded::new(&srcs)?;
        let memory = self.encode(&mut g, &self.params, &padded)?;
        let tgt = Padded::new(candidates)?;
        let (inputs, outputs) = frame(&tgt);
        let input = Padded::new(&inputs)?;
        let logits = self.decode_logits(&mut g, &self.params, memory, &padded.mask, &input)?;
        let (v, w) = (self.config.vocab_size, input.width);
        let data = g.value(logits).data();
        Ok(outputs
            .iter()
            .enumerate()
            .map(|(r, out)| {
                let sum: f64 = out
                    .iter()
                    .enumerate()
                    .map(|(t, &y)| log_softmax(&data[(r * w + t) * v..(r * w + t + 1) * v])[y])
                    .sum();
                sum / out.len() as f64
            })
            .collect())
    }

    pub fn rescore(&self, src: &[usize], candidate: &[usize]) -> Result<f64> {
        Ok(self.rescore_batch(src, &[candidate.to_vec()])?[0])
    }

    /// Per-position next-token distributions for a candidate, as probabilities.
    pub fn token_distributions(&self, src: &[usize], candidate: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let (memory, mask) = self.encode_single(&mut g, src)?;
        let input = Padded::new(&[std::iter::once(BOS).chain(candidate.iter().copied()).collect::<Vec<_>>()])?;
        let logits = self.decode_logits(&mut g, &self.params, memory, &mask, &input)?;
        let v = self.config.vocab_size;
        Ok(g.value(logits)
            .data()
            .chunks(v)
            .map(|row| log_softmax(row).iter().map(|l| l.exp()).collect())
            .collect())
    }
}

/// `(<s> + y, y + </s>)` for each row of a padded target batch.
fn frame(tgt: &Padded) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    (0..tgt.rows)
        .map(|r| {
            let y = tgt.row(r);
            let input = std::iter::once(BOS).chain(y.iter().copied()).collect();
            let output = y.iter().copied().chain(std::iter::once(EOS)).collect();
            (input, output)
        })
        .unzip()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - log_z).collect()
}

/// Beam search over a next-token model.
///
/// `step` maps equal-length prefixes to log-probability rows. Candidates are
/// ranked by summed log-probability (ties: earlier beam, then lower token id);
/// a candidate ending in `eos` is finished. The result is the finished
/// hypothesis with the best score per scored token; unfinished hypotheses at
/// the length limit are scored over their own length.
pub fn beam_search<F>(mut step: F, beam: usize, max_len: usize, eos: usize) -> Result<Hypothesis>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let lps = step(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((alive[b].1 + l, b, tok));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::new();
        for &(score, b, tok) in cands.iter().take(beam) {
            if tok == eos {
                finished.push(Hypothesis {
                    tokens: alive[b].0.clone(),
                    score: score / (alive[b].0.len() + 1) as f64,
                });
            } else {
                let mut p = alive[b].0.clone();
                p.push(tok);
                next.push((p, score));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam {
            break;
        }
    }
    for (tokens, raw) in alive {
        if !tokens.is_empty() && finished.len() < beam {
            finished.push(Hypothesis {
                score: raw / tokens.len() as f64,
                tokens,
            });
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().map_or(true, |b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
}

/// Per-step training losses of the teacher.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherLog {
    pub losses: Vec<f64>,
}

impl TeacherLog {
    /// Mean loss over the last `n` steps.
    pub fn recent_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

pub fn teacher_train(pairs: &[SentencePair], config: TeacherConfig) -> Result<(Teacher, TeacherLog)> {
    if pairs.is_empty() {
        return Err(Error::Data("teacher training needs a non-empty corpus".into()));
    }
    let mut teacher = Teacher::new(config)?;
    let cfg = teacher.config.clone();
    let mut adam = Adam::with_defaults(&teacher.params);
    let mut log = TeacherLog::default();
    let mut epoch = 0u64;
    let mut batches = Vec::new();
    let mut step = 0;
    while step < cfg.steps {
        if batches.is_empty() {
            // Teacher pairs carry one extra position for the end marker.
            let b = batch_by_tokens(pairs, cfg.max_tokens.saturating_sub(1).max(1), cfg.seed.wrapping_add(epoch))?;
            if b.batches.is_empty() {
                return Err(Error::Data("every pair exceeds the teacher token budget".into()));
            }
            batches = b.batches;
            batches.reverse();
            epoch += 1;
        }
        let batch = batches.pop().expect("refilled above");
        step += 1;
        let lr = lr_schedule(step, cfg.warmup, cfg.peak_lr);
        let mut g = Graph::new().with_dropout_seed(cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64));
        let loss = teacher.loss(&mut g, &teacher.params, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("teacher loss {value} at lr {lr:e}"),
            });
        }
        g.backward(loss)?;
        teacher.params.zero_grads();
        g.accumulate_param_grads(&mut teacher.params);
        adam.step(&mut teacher.params, lr);
        log.losses.push(value);
        if step % 100 == 0 {
            log::info!("teacher step {step} loss {:.4} lr {lr:.2e}", log.recent_mean(100));
        }
    }
    Ok((teacher, log))
}

/// Replaces every target with the teacher's beam output.
pub fn distill(corpus: &TextCorpus, vocab: &Vocabulary, teacher: &Teacher, beam: usize) -> Result<TextCorpus> {
    let mut out = TextCorpus {
        source: corpus.source.clone(),
        target: Vec::with_capacity(corpus.len()),
    };
    for (i, line) in corpus.source.iter().enumerate() {
        let src = vocab.encode(line);
        if src.is_empty() {
            return Err(Error::Data(format!("line {} has an empty source", i + 1)));
        }
        let hyp = teacher.beam_decode(&src, beam)?;
        out.target.push(vocab.decode(&hyp.tokens));
    }
    Ok(out)
}
