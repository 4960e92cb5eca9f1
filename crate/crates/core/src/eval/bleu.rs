//! Sentence BLEU.
//!
//! Conventions, fixed for every score this crate reports:
//!
//! * modified n-gram precision with counts clipped by the maximum count in
//!   any single reference;
//! * orders `1..=min(4, |hyp|)` with uniform weights, so a hypothesis shorter
//!   than four tokens is scored on the orders it has;
//! * a zero match count at order `n >= 2` is smoothed to `1 / (total + 1)`;
//!   a zero unigram match gives a score of 0;
//! * brevity penalty `exp(1 - r / c)` when `c < r`, where `r` is the
//!   reference length closest to `c` (the shorter one on ties);
//! * an empty hypothesis scores 0 and logs a warning.
//!
//! Scores are on a 0..=100 scale. [`corpus_bleu`] is the mean sentence score.

use std::collections::HashMap;

pub const MAX_ORDER: usize = 4;

pub const CONVENTION: &str = "sentence BLEU, orders 1..min(4,len), clipped counts, \
add-one on zero matches for orders >= 2, closest-reference brevity penalty, corpus = mean";

fn ngram_counts<'a, S: AsRef<str>>(words: &'a [S], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and total hypothesis n-grams at order `n`.
pub fn clipped_counts<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn closest_ref_len(hyp_len: usize, refs: &[usize]) -> usize {
    *refs
        .iter()
        .min_by_key(|&&r| (r.abs_diff(hyp_len), r))
        .expect("at least one reference")
}

/// BLEU of `hyp` against `refs`, on whitespace-split words.
pub fn bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>]) -> f64 {
    if hyp.is_empty() {
        log::warn!("empty hypothesis scored as BLEU 0");
        return 0.0;
    }
    if refs.is_empty() {
        return 0.0;
    }
    let orders = hyp.len().min(MAX_ORDER);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (m, t) = clipped_counts(hyp, refs, n);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (t as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hyp.len();
    let r = closest_ref_len(c, &refs.iter().map(Vec::len).collect::<Vec<_>>());
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / orders as f64).exp()
}

pub fn bleu_str(hyp: &str, refs: &[&str]) -> f64 {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
    bleu(&h, &r)
}

/// Mean sentence BLEU over aligned hypotheses and reference sets.
pub fn corpus_bleu(hyps: &[String], refs: &[Vec<String>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, rs)| {
            let rs: Vec<&str> = rs.iter().map(String::as_str).collect();
            bleu_str(h, &rs)
        })
        .sum();
    total / hyps.len() as f64
}
