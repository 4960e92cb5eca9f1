//! Vocabulary, tokenisation, labelled datasets and batching.
//!
//! A corpus directory holds one file per split and style, named
//! `{split}.{style}.txt`, one whitespace-tokenised sentence per line.
//! Optional human references for the test split live in
//! `test.{style}.ref.txt`, line-aligned with `test.{style}.txt`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Counts whitespace tokens over `lines`; tokens seen at least
    /// `min_freq` times are kept, ordered by frequency then lexicographically.
    pub fn build<'s>(lines: impl IntoIterator<Item = &'s str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().map(|(w, _)| w.to_string()))
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words with single spaces, dropping padding and control markers.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | SEP))
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&id) => Err(Error::UnknownToken {
                id: id as u32,
                vocab: self.len(),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub style: usize,
    /// Human-written transfer of this sentence, as raw text.
    pub reference: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[Example] {
        match name {
            "train" => &self.train,
            "dev" => &self.dev,
            _ => &self.test,
        }
    }

    pub fn has_references(&self) -> bool {
        !self.test.is_empty() && self.test.iter().all(|e| e.reference.is_some())
    }
}

/// Non-blank lines of a text file, trimmed.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn split_path(dir: &Path, split: &str, style: usize) -> std::path::PathBuf {
    dir.join(format!("{split}.{style}.txt"))
}

/// Builds the vocabulary from the training files of every style.
pub fn build_vocab(dir: &Path, num_styles: usize, min_freq: usize) -> Result<Vocab> {
    let mut lines = Vec::new();
    for s in 0..num_styles {
        lines.extend(read_lines(&split_path(dir, "train", s))?);
    }
    Vocab::build(lines.iter().map(String::as_str), min_freq)
}

fn load_split(dir: &Path, split: &str, vocab: &Vocab, num_styles: usize, max_len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut truncated = 0;
    for style in 0..num_styles {
        let lines = read_lines(&split_path(dir, split, style))?;
        let refs = if split == "test" {
            let p = dir.join(format!("test.{style}.ref.txt"));
            if p.exists() {
                let r = read_lines(&p)?;
                if r.len() != lines.len() {
                    return Err(Error::Parse {
                        path: p.display().to_string(),
                        line: r.len().min(lines.len()) + 1,
                        msg: format!("{} references for {} sentences", r.len(), lines.len()),
                    });
                }
                Some(r)
            } else {
                None
            }
        } else {
            None
        };
        for (i, line) in lines.iter().enumerate() {
            let mut tokens = vocab.tokenize(line);
            if tokens.len() > max_len {
                tokens.truncate(max_len);
                truncated += 1;
            }
            out.push(Example {
                tokens,
                style,
                reference: refs.as_ref().map(|r| r[i].clone()),
            });
        }
    }
    if truncated > 0 {
        log::warn!("{split}: truncated {truncated} sentences to {max_len} tokens");
    }
    log::info!("{split}: {} sentences", out.len());
    Ok(out)
}

pub fn load_dataset(dir: &Path, vocab: &Vocab, num_styles: usize, max_len: usize) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(dir, "train", vocab, num_styles, max_len)?,
        dev: load_split(dir, "dev", vocab, num_styles, max_len)?,
        test: load_split(dir, "test", vocab, num_styles, max_len)?,
    })
}

/// A padded batch. Rows shorter than the longest are filled with [`PAD`];
/// `lengths` marks the real extent of each row and losses never look past it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub styles: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'e>(examples: impl IntoIterator<Item = &'e Example>) -> Self {
        let examples: Vec<&Example> = examples.into_iter().collect();
        let width = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let ids = examples
            .iter()
            .map(|e| {
                let mut row = e.tokens.clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        Self {
            ids,
            lengths: examples.iter().map(|e| e.tokens.len()).collect(),
            styles: examples.iter().map(|e| e.style).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row `i` without padding.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i][..self.lengths[i]]
    }
}

/// Position of a [`BatchIterator`], enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IterState {
    pub epoch: u64,
    pub pos: usize,
}

/// Endless epoch-wise shuffled batches of item indices. The order of epoch
/// `e` depends only on `(seed, e)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    state: IterState,
    order: Vec<usize>,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Self::resume(len, batch_size, seed, IterState::default())
    }

    pub fn resume(len: usize, batch_size: usize, seed: u64, state: IterState) -> Self {
        let mut it = Self {
            len,
            batch_size: batch_size.max(1),
            seed,
            state,
            order: Vec::new(),
        };
        it.shuffle();
        it
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.state.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn state(&self) -> IterState {
        self.state
    }

    /// The next batch of the current epoch; the last one may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.len == 0 {
            return Vec::new();
        }
        if self.state.pos >= self.len {
            self.state.epoch += 1;
            self.state.pos = 0;
            self.shuffle();
        }
        let end = (self.state.pos + self.batch_size).min(self.len);
        let out = self.order[self.state.pos..end].to_vec();
        self.state.pos = end;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_orders_by_frequency_then_text() {
        let v = Vocab::build(["a b a"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], ["a", "b"]);
        let v = Vocab::build(["c b c b a"], 1).unwrap();
        assert_eq!(&v.tokens()[5..], ["b", "c", "a"]);
        let v = Vocab::build(["a b a"], 2).unwrap();
        assert_eq!(&v.tokens()[5..], ["a"]);
        assert!(Vocab::build([""], 1).is_err());
    }

    #[test]
    fn tokenize_round_trip_and_unk() {
        let v = Vocab::build(["hello world"], 1).unwrap();
        let ids = v.tokenize("hello world");
        assert_eq!(ids, vec![v.id("hello"), v.id("world")]);
        assert_eq!(v.detokenize(&ids), "hello world");
        assert_eq!(v.tokenize("goodbye"), vec![UNK]);
        assert!(v.check(&[v.len()]).is_err());
    }

    #[test]
    fn iterator_batches_cover_epochs() {
        let mut it = BatchIterator::new(20, 8, 3);
        let sizes: Vec<usize> = (0..3).map(|_| it.next_batch().len()).collect();
        assert_eq!(sizes, vec![8, 8, 4]);
        let mut again = BatchIterator::new(20, 8, 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| again.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn iterator_resumes_exactly() {
        let mut a = BatchIterator::new(13, 4, 9);
        for _ in 0..5 {
            a.next_batch();
        }
        let mut b = BatchIterator::resume(13, 4, 9, a.state());
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn batch_pads_with_pad() {
        let e = |t: Vec<usize>| Example {
            tokens: t,
            style: 0,
            reference: None,
        };
        let b = Batch::from_examples(&[e(vec![7, 8, 9]), e(vec![7])]);
        assert_eq!(b.ids[1], vec![7, PAD, PAD]);
        assert_eq!(b.row(1), &[7]);
    }
}
