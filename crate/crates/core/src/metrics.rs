//! BLEU, repeated-token statistics and length-bucket reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Collapses runs of identical consecutive tokens; returns the kept tokens and
/// the number removed.
pub fn postprocess_dedup<T: PartialEq + Clone>(tokens: &[T]) -> (Vec<T>, usize) {
    let mut out: Vec<T> = Vec::with_capacity(tokens.len());
    for t in tokens {
        if out.last() != Some(t) {
            out.push(t.clone());
        }
    }
    let removed = tokens.len() - out.len();
    (out, removed)
}

/// Per-sentence counts needed for the repeated-token ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepeatCount {
    pub removed: usize,
    pub raw_len: usize,
    pub src_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepeatStats {
    pub overall: f64,
    pub short: f64,
    pub long: f64,
}

fn ratio(items: &[RepeatCount]) -> f64 {
    let raw: usize = items.iter().map(|c| c.raw_len).sum();
    if raw == 0 {
        return 0.0;
    }
    100.0 * items.iter().map(|c| c.removed).sum::<usize>() as f64 / raw as f64
}

/// `100 * removed / raw` over the corpus and over its short and long halves.
///
/// Halves are formed by sorting on source length (stable, so ties keep corpus
/// order) and splitting at the midpoint; the short half gets the smaller share
/// of an odd count.
pub fn repeated_token_ratio(counts: &[RepeatCount]) -> Result<RepeatStats> {
    if counts.is_empty() {
        return Err(Error::Data("repeated-token ratio of an empty corpus".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by_key(|c| c.src_len);
    let mid = sorted.len() / 2;
    Ok(RepeatStats {
        overall: ratio(counts),
        short: ratio(&sorted[..mid]),
        long: ratio(&sorted[mid..]),
    })
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]` with a brevity penalty.
///
/// Precisions for n >= 2 use add-one smoothing, `(matches + 1) / (total + 1)`.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (bp + log_p / 4.0).exp())
}

/// BLEU per source-length bucket. Buckets are `[edges[i], edges[i + 1])`,
/// the last one open-ended; empty buckets are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketScore {
    pub lo: usize,
    pub hi: Option<usize>,
    pub sentences: usize,
    pub bleu: f64,
}

pub const DEFAULT_BUCKET_EDGES: [usize; 4] = [0, 10, 20, 30];

pub fn length_bucket_report<T: Eq + Hash + Clone>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    src_lengths: &[usize],
    edges: &[usize],
) -> Result<Vec<BucketScore>> {
    if hyps.len() != refs.len() || hyps.len() != src_lengths.len() {
        return Err(Error::Contract("bucket report inputs differ in length".into()));
    }
    if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bucket edges {edges:?} must start at 0 and increase")));
    }
    let mut out = Vec::new();
    for (i, &lo) in edges.iter().enumerate() {
        let hi = edges.get(i + 1).copied();
        let idx: Vec<usize> = (0..hyps.len())
            .filter(|&j| src_lengths[j] >= lo && hi.map_or(true, |h| src_lengths[j] < h))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let h: Vec<Vec<T>> = idx.iter().map(|&j| hyps[j].clone()).collect();
        let r: Vec<Vec<T>> = idx.iter().map(|&j| refs[j].clone()).collect();
        out.push(BucketScore {
            lo,
            hi,
            sentences: idx.len(),
            bleu: bleu(&h, &r)?,
        });
    }
    Ok(out)
}

impl BucketScore {
    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{})", self.lo, h),
            None => format!("[{},inf)", self.lo),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sentences: usize,
    pub bleu: f64,
    pub repeats: RepeatStats,
    pub buckets: Vec<BucketScore>,
    pub k_dec: Option<usize>,
    pub lpd_radius: Option<usize>,
    pub mean_latency_ms: Option<f64>,
}

pub const SMOOTHING: &str = "add-one for n>=2";

impl EvalReport {
    pub fn build(
        hyps: &[Vec<String>],
        refs: &[Vec<String>],
        src_lengths: &[usize],
        counts: &[RepeatCount],
    ) -> Result<Self> {
        Ok(EvalReport {
            sentences: hyps.len(),
            bleu: bleu(hyps, refs)?,
            repeats: repeated_token_ratio(counts)?,
            buckets: length_bucket_report(hyps, refs, src_lengths, &DEFAULT_BUCKET_EDGES)?,
            k_dec: None,
            lpd_radius: None,
            mean_latency_ms: None,
        })
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentences = {}", self.sentences);
        let _ = writeln!(s, "bleu = {:.4}", self.bleu);
        let _ = writeln!(s, "bleu_smoothing = {SMOOTHING}");
        let _ = writeln!(s, "repeat_ratio = {:.4}", self.repeats.overall);
        let _ = writeln!(s, "repeat_ratio_short = {:.4}", self.repeats.short);
        let _ = writeln!(s, "repeat_ratio_long = {:.4}", self.repeats.long);
        if let Some(k) = self.k_dec {
            let _ = writeln!(s, "k_dec = {k}");
        }
        if let Some(r) = self.lpd_radius {
            let _ = writeln!(s, "lpd_radius = {r}");
        }
        if let Some(ms) = self.mean_latency_ms {
            let _ = writeln!(s, "mean_latency_ms = {ms:.4}");
        }
        for b in &self.buckets {
            let _ = writeln!(s, "bucket_bleu{} = {:.4} ({} sentences)", b.label(), b.bleu, b.sentences);
        }
        s
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "sentences,{}", self.sentences);
        let _ = writeln!(s, "bleu,{:.6}", self.bleu);
        let _ = writeln!(s, "repeat_ratio,{:.6}", self.repeats.overall);
        let _ = writeln!(s, "repeat_ratio_short,{:.6}", self.repeats.short);
        let _ = writeln!(s, "repeat_ratio_long,{:.6}", self.repeats.long);
        if let Some(k) = self.k_dec {
            let _ = writeln!(s, "k_dec,{k}");
        }
        if let Some(r) = self.lpd_radius {
            let _ = writeln!(s, "lpd_radius,{r}");
        }
        if let Some(ms) = self.mean_latency_ms {
            let _ = writeln!(s, "mean_latency_ms,{ms:.6}");
        }
        for b in &self.buckets {
            let _ = writeln!(s, "bucket_bleu{},{:.6}", b.label(), b.bleu);
        }
        s
    }
}
