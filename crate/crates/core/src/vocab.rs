//! Shared source/target vocabulary with a fixed reserved-id layout.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_lines, write_atomic};

pub const PAD: usize = 0;
/// Filler token fed to every position of the non-autoregressive decoder.
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenised lines.
    ///
    /// Tokens are ordered by descending count, ties broken lexicographically;
    /// tokens seen fewer than `min_count` times are dropped.
    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count && !RESERVED.contains(tok))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Reserved tokens followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn build(paths: &[impl AsRef<Path>], min_count: usize) -> Result<Self> {
        let mut lines = Vec::new();
        for p in paths {
            lines.extend(read_lines(p.as_ref())?);
        }
        Self::from_lines(lines.iter().map(String::as_str), min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Unknown tokens map to [`UNK`].
    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Self::from_tokens(lines.into_iter().skip(RESERVED.len()))
    }
}
