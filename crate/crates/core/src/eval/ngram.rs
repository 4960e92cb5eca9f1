//! Interpolated Kneser-Ney n-gram language model with a fixed discount.
//!
//! Sentences are padded with `order - 1` begin markers and one end marker.
//! The highest order uses raw counts; lower orders use continuation counts
//! (the number of distinct left extensions). The recursion bottoms out in
//! the uniform distribution over the vocabulary, which is every training
//! word plus the end marker and the unknown-word class, so every token has
//! non-zero probability.

use std::collections::{HashMap, HashSet};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const DISCOUNT: f64 = 0.75;

#[derive(Clone, Debug, Default)]
struct Table {
    /// Count (raw or continuation) of each full n-gram.
    counts: HashMap<Vec<u32>, f64>,
    /// Per context: total count and number of distinct continuations.
    contexts: HashMap<Vec<u32>, (f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct NGramLm {
    order: usize,
    discount: f64,
    words: HashMap<String, u32>,
    /// `tables[k]` holds n-grams of length `k + 1`.
    tables: Vec<Table>,
}

impl NGramLm {
    /// Trains on whitespace-tokenised sentences.
    pub fn train<S: AsRef<str>>(sentences: &[S], order: usize) -> Self {
        Self::train_with_discount(sentences, order, DISCOUNT)
    }

    pub fn train_with_discount<S: AsRef<str>>(sentences: &[S], order: usize, discount: f64) -> Self {
        assert!(order >= 1, "order must be positive");
        let mut words: HashMap<String, u32> = HashMap::new();
        for w in [BOS, EOS, UNK] {
            let n = words.len() as u32;
            words.insert(w.to_string(), n);
        }
        let mut highest: HashMap<Vec<u32>, f64> = HashMap::new();
        for s in sentences {
            let ids = Self::pad_ids(&mut words, s.as_ref(), order, true);
            for g in ids.windows(order) {
                *highest.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }

        let mut tables = vec![Table::default(); order];
        tables[order - 1].counts = highest;
        for k in (0..order - 1).rev() {
            // Continuation count of g = distinct left extensions of g one order up.
            let mut cont: HashMap<Vec<u32>, f64> = HashMap::new();
            for g in tables[k + 1].counts.keys() {
                *cont.entry(g[1..].to_vec()).or_insert(0.0) += 1.0;
            }
            tables[k].counts = cont;
        }
        for t in &mut tables {
            let mut ctx: HashMap<Vec<u32>, (f64, f64)> = HashMap::new();
            for (g, &c) in &t.counts {
                let e = ctx.entry(g[..g.len() - 1].to_vec()).or_insert((0.0, 0.0));
                e.0 += c;
                e.1 += 1.0;
            }
            t.contexts = ctx;
        }
        Self {
            order,
            discount,
            words,
            tables,
        }
    }

    fn pad_ids(words: &mut HashMap<String, u32>, s: &str, order: usize, grow: bool) -> Vec<u32> {
        let mut ids = vec![0; order - 1];
        for w in s.split_whitespace() {
            let id = match words.get(w) {
                Some(&id) => id,
                None if grow => {
                    let id = words.len() as u32;
                    words.insert(w.to_string(), id);
                    id
                }
                None => words[UNK],
            };
            ids.push(id);
        }
        ids.push(words[EOS]);
        ids
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Size of the predicted vocabulary (training words, end marker, unknown).
    pub fn vocab_size(&self) -> usize {
        self.words.len() - 1
    }

    /// Every predictable token: training words, the end marker and `<unk>`.
    pub fn vocab(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.words.keys().map(String::as_str).filter(|w| *w != BOS).collect();
        v.sort_unstable();
        v
    }

    /// Every context of the highest order seen in training, as words.
    pub fn contexts(&self) -> Vec<Vec<&str>> {
        let names: HashMap<u32, &str> = self.words.iter().map(|(w, &i)| (i, w.as_str())).collect();
        let mut out: Vec<Vec<&str>> = self.tables[self.order - 1]
            .contexts
            .keys()
            .map(|c| c.iter().map(|i| names[i]).collect())
            .collect();
        out.sort();
        out
    }

    fn id(&self, w: &str) -> u32 {
        self.words.get(w).copied().unwrap_or(self.words[UNK])
    }

    fn prob_ids(&self, context: &[u32], w: u32) -> f64 {
        let mut p = 1.0 / self.vocab_size() as f64;
        // Build up from unigrams to the full context.
        for k in 0..self.order {
            if k > context.len() {
                break;
            }
            let ctx = &context[context.len() - k..];
            let t = &self.tables[k];
            let Some(&(total, distinct)) = t.contexts.get(ctx) else {
                continue;
            };
            let mut g = ctx.to_vec();
            g.push(w);
            let c = t.counts.get(&g).copied().unwrap_or(0.0);
            p = (c - self.discount).max(0.0) / total + self.discount * distinct / total * p;
        }
        p
    }

    /// `P(word | context)`, using the last `order - 1` context words.
    /// Missing history is filled with begin markers.
    pub fn prob(&self, context: &[&str], word: &str) -> f64 {
        let need = self.order - 1;
        let mut ctx: Vec<u32> = vec![0; need.saturating_sub(context.len())];
        ctx.extend(context[context.len().saturating_sub(need)..].iter().map(|w| self.id(w)));
        self.prob_ids(&ctx, self.id(word))
    }

    /// Natural-log probability of the sentence and the number of scored
    /// tokens (its words plus the end marker).
    pub fn sentence_log_prob(&self, sentence: &str) -> (f64, usize) {
        let mut words = self.words.clone();
        let ids = Self::pad_ids(&mut words, sentence, self.order, false);
        let n = self.order - 1;
        let mut lp = 0.0;
        for i in n..ids.len() {
            lp += self.prob_ids(&ids[i - n..i], ids[i]).ln();
        }
        (lp, ids.len() - n)
    }

    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[S]) -> f64 {
        perplexity_of(sentences, |s| self.sentence_log_prob(s))
    }
}

/// `exp(-(sum of log p) / T)` over every scored token of every sentence.
pub fn perplexity_of<S: AsRef<str>>(sentences: &[S], mut score: impl FnMut(&str) -> (f64, usize)) -> f64 {
    let (mut lp, mut tokens) = (0.0, 0usize);
    for s in sentences {
        let (l, n) = score(s.as_ref());
        lp += l;
        tokens += n;
    }
    if tokens == 0 {
        return f64::NAN;
    }
    (-lp / tokens as f64).exp()
}

/// Distinct words of `sentences` (helper for vocabulary checks in tests).
pub fn word_set<S: AsRef<str>>(sentences: &[S]) -> HashSet<String> {
    sentences
        .iter()
        .flat_map(|s| s.as_ref().split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_model_has_perplexity_v() {
        let v: f64 = 37.0;
        let ppl = perplexity_of(&["a b c", "d"], |s| {
            let n = s.split_whitespace().count() + 1;
            (n as f64 * (1.0 / v).ln(), n)
        });
        assert!((ppl - v).abs() < 1e-9);
    }

    #[test]
    fn unknown_words_have_finite_probability() {
        let lm = NGramLm::train(&["a b c", "b c d"], 3);
        let (lp, n) = lm.sentence_log_prob("zzz yyy");
        assert!(lp.is_finite());
        assert_eq!(n, 3);
        assert_eq!(lm.vocab_size(), 6);
    }
}
