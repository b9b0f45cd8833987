//! Parallel corpora, padded batches and token-budget batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io_util::{read_lines, write_lines_atomic};
use crate::vocab::{Vocabulary, PAD};

/// Aligned source/target lines of whitespace-separated tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl TextCorpus {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn src_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "src")
    }

    pub fn tgt_path(prefix: &Path) -> PathBuf {
        with_suffix(prefix, "tgt")
    }

    /// Reads `<prefix>.src` and `<prefix>.tgt`.
    pub fn read(prefix: &Path) -> Result<Self> {
        let source = read_lines(&Self::src_path(prefix))?;
        let target = read_lines(&Self::tgt_path(prefix))?;
        if source.len() != target.len() {
            return Err(Error::Data(format!(
                "{}: {} source lines but {} target lines",
                prefix.display(),
                source.len(),
                target.len()
            )));
        }
        Ok(TextCorpus { source, target })
    }

    pub fn write(&self, prefix: &Path) -> Result<()> {
        write_lines_atomic(&Self::src_path(prefix), &self.source)?;
        write_lines_atomic(&Self::tgt_path(prefix), &self.target)
    }

    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.source.iter().chain(&self.target).map(String::as_str)
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
        self.source
            .iter()
            .zip(&self.target)
            .enumerate()
            .map(|(i, (s, t))| {
                let pair = SentencePair {
                    source: vocab.encode(s),
                    target: vocab.encode(t),
                };
                if pair.source.is_empty() || pair.target.is_empty() {
                    return Err(Error::Data(format!("line {} has an empty side", i + 1)));
                }
                Ok(pair)
            })
            .collect()
    }
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl SentencePair {
    pub fn max_len(&self) -> usize {
        self.source.len().max(self.target.len())
    }
}

/// Right-padded id matrix `[rows, width]` with a 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub rows: usize,
    pub width: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        let width = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        Self::with_width(seqs, width)
    }

    pub fn with_width<S: AsRef<[usize]>>(seqs: &[S], width: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("cannot pad an empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() || s.len() > width {
                return Err(Error::Contract(format!(
                    "sequence of length {} does not fit width {width}",
                    s.len()
                )));
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(width - s.len()));
            mask.extend(std::iter::repeat(1.0).take(s.len()));
            mask.extend(std::iter::repeat(0.0).take(width - s.len()));
            lengths.push(s.len());
        }
        Ok(Padded {
            rows: seqs.len(),
            width,
            ids,
            mask,
            lengths,
        })
    }

    /// Mask of `lengths` alone, for target positions that have no ids.
    pub fn mask_for_lengths(lengths: &[usize], width: usize) -> Vec<f64> {
        lengths
            .iter()
            .flat_map(|&l| (0..width).map(move |t| if t < l { 1.0 } else { 0.0 }))
            .collect()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Padded,
    pub tgt: Padded,
    /// Position of each pair in the originating corpus.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair], indices: Vec<usize>) -> Result<Self> {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
        Ok(Batch {
            src: Padded::new(&src)?,
            tgt: Padded::new(&tgt)?,
            indices,
        })
    }

    pub fn size(&self) -> usize {
        self.src.rows
    }

    pub fn padded_tokens(&self) -> usize {
        self.size() * self.src.width.max(self.tgt.width)
    }
}

#[derive(Clone, Debug)]
pub struct Batching {
    pub batches: Vec<Batch>,
    /// Pairs longer than the token budget, left out of every batch.
    pub skipped: usize,
}

/// Packs pairs into batches whose padded size (`rows * longest side`) stays
/// within `max_tokens`.
///
/// Pairs are shuffled with `seed`, stably sorted by length so that similar
/// lengths share a batch, packed greedily, and the batch order is shuffled again.
pub fn batch_by_tokens(pairs: &[SentencePair], max_tokens: usize, seed: u64) -> Result<Batching> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].max_len());

    let mut skipped = 0;
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0;
    for i in order {
        let len = pairs[i].max_len();
        if len > max_tokens {
            skipped += 1;
            continue;
        }
        let widened = current_max.max(len);
        if !current.is_empty() && (current.len() + 1) * widened > max_tokens {
            groups.push(std::mem::take(&mut current));
            current_max = 0;
        }
        current_max = current_max.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    if skipped > 0 {
        log::warn!("{skipped} pairs exceed the {max_tokens}-token budget and were skipped");
    }
    groups.shuffle(&mut rng);
    let batches = groups
        .into_iter()
        .map(|idx| {
            let ps: Vec<SentencePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_pairs(&ps, idx)
        })
        .collect::<Result<_>>()?;
    Ok(Batching { batches, skipped })
}

/// Splits `pairs` into fixed-size chunks in corpus order (for evaluation).
pub fn sequential_batches(pairs: &[SentencePair], rows: usize) -> Result<Vec<Batch>> {
    pairs
        .chunks(rows.max(1))
        .enumerate()
        .map(|(c, chunk)| {
            let start = c * rows.max(1);
            Batch::from_pairs(chunk, (start..start + chunk.len()).collect())
        })
        .collect()
}
