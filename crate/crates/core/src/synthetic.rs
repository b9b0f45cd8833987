//! Synthetic translation tasks.
//!
//! The `multi-synonym` task is the interesting one: every source word owns `s`
//! target phrases (one or two tokens each) and each sentence picks one
//! synonym register, so a source sentence has several valid translations of
//! different lengths. Independent per-position prediction then produces the
//! repeated and missing tokens that coverage modeling is meant to reduce.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TextCorpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    LexicalSwap,
    MultiSynonym,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexical-swap" => Ok(Task::LexicalSwap),
            "multi-synonym" => Ok(Task::MultiSynonym),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy, reverse, lexical-swap or multi-synonym)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::LexicalSwap => "lexical-swap",
            Task::MultiSynonym => "multi-synonym",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub size: usize,
    /// Seed for sentence sampling.
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct source words.
    pub words: usize,
    /// Synonyms per source word (multi-synonym only).
    pub synonyms: usize,
    /// Probability that a synonym phrase is two tokens long.
    pub fertility2_prob: f64,
    /// Seed for the lexicon; train and dev splits must share it.
    pub lexicon_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::MultiSynonym,
            size: 1000,
            seed: 0,
            min_len: 3,
            max_len: 30,
            words: 32,
            synonyms: 2,
            fertility2_prob: 0.25,
            lexicon_seed: 0,
        }
    }
}

/// Source word list and, per word, its target synonym phrases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub words: Vec<String>,
    pub phrases: Vec<Vec<Vec<String>>>,
    /// Whether the target is the reversed source (reverse task only).
    pub reversed: bool,
}

impl Lexicon {
    pub fn build(spec: &SyntheticSpec) -> Result<Self> {
        if spec.words == 0 {
            return Err(Error::Config("synthetic lexicon needs at least one word".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.lexicon_seed ^ 0x5eed_1e81c0);
        let words: Vec<String> = (0..spec.words).map(|i| format!("s{i}")).collect();
        let phrases = match spec.task {
            Task::Copy | Task::Reverse => words.iter().map(|w| vec![vec![w.clone()]]).collect(),
            Task::LexicalSwap => {
                let mut perm: Vec<usize> = (0..spec.words).collect();
                perm.shuffle(&mut rng);
                perm.iter().map(|&j| vec![vec![format!("v{j}")]]).collect()
            }
            Task::MultiSynonym => {
                if !(1..=26).contains(&spec.synonyms) {
                    return Err(Error::Config(format!(
                        "synonyms must be in 1..=26, got {}",
                        spec.synonyms
                    )));
                }
                (0..spec.words)
                    .map(|i| {
                        (0..spec.synonyms)
                            .map(|j| {
                                let stem = format!("t{i}{}", (b'a' + j as u8) as char);
                                if rng.gen::<f64>() < spec.fertility2_prob {
                                    vec![stem.clone(), format!("{stem}x")]
                                } else {
                                    vec![stem]
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(Lexicon {
            words,
            phrases,
            reversed: spec.task == Task::Reverse,
        })
    }

    fn word_index(&self, w: &str) -> Option<usize> {
        w.strip_prefix('s')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&i| i < self.words.len())
    }

    /// Whether `target` is a concatenation of synonym phrases of the source
    /// words, in order (reversed for the reverse task).
    pub fn is_reachable(&self, source: &[&str], target: &[&str]) -> bool {
        let Some(mut idx) = source
            .iter()
            .map(|w| self.word_index(w))
            .collect::<Option<Vec<_>>>()
        else {
            return false;
        };
        if self.reversed {
            idx.reverse();
        }
        // reach[j]: the first `j` target tokens can be produced by a prefix of the source.
        let mut reach = vec![false; target.len() + 1];
        reach[0] = true;
        for &w in &idx {
            let mut next = vec![false; target.len() + 1];
            for j in 0..=target.len() {
                if !reach[j] {
                    continue;
                }
                for p in &self.phrases[w] {
                    let end = j + p.len();
                    if end <= target.len() && target[j..end].iter().zip(p).all(|(a, b)| a == b) {
                        next[end] = true;
                    }
                }
            }
            reach = next;
        }
        reach[target.len()]
    }

    pub fn target_tokens(&self) -> Vec<String> {
        let mut v: Vec<String> = self.phrases.iter().flatten().flatten().cloned().collect();
        v.sort();
        v.dedup();
        v
    }
}

pub struct SyntheticCorpus {
    pub corpus: TextCorpus,
    pub lexicon: Lexicon,
}

/// Generates `spec.size` pairs; a pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let lexicon = Lexicon::build(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = TextCorpus::default();
    for _ in 0..spec.size {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.words)).collect();
        let register = rng.gen_range(0..lexicon.phrases[0].len());
        let mut tgt: Vec<&str> = Vec::new();
        for &w in &src {
            tgt.extend(lexicon.phrases[w][register].iter().map(String::as_str));
        }
        if lexicon.reversed {
            tgt.reverse();
        }
        corpus.source.push(
            src.iter()
                .map(|&w| lexicon.words[w].as_str())
                .collect::<Vec<_>>()
                .join(" "),
        );
        corpus.target.push(tgt.join(" "));
    }
    Ok(SyntheticCorpus { corpus, lexicon })
}
