//! BLEU, Kneser-Ney perplexity and the style classifier against
//! independent oracles.

use std::collections::{BTreeMap, BTreeSet};

use pst_core::corpus::{build_vocab, load_dataset};
use pst_core::eval::bleu::{bleu, bleu_str, clipped_counts, MAX_ORDER};
use pst_core::eval::classifier::{ClassifierConfig, StyleClassifier};
use pst_core::eval::ngram::{perplexity_of, NGramLm, DISCOUNT, EOS};
use pst_core::eval::{evaluate, EvalSuite, Identity};
use pst_core::synth::{synth_corpus, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bleu_of_a_sentence_against_itself_is_exactly_100() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..12);
        let s: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..5))).collect();
        assert_eq!(bleu(&s, &[s.clone()]), 100.0, "{s:?}");
    }
}

#[test]
fn bleu_hand_example() {
    // Three hypothesis tokens, so orders 1..3:
    //   p1 = 1/3 (clipped), p2 = 0/2 -> 1/3, p3 = 0/1 -> 1/2, no brevity penalty.
    let expected = 100.0 * (1.0f64 / 3.0 * 1.0 / 3.0 * 1.0 / 2.0).powf(1.0 / 3.0);
    assert!((bleu_str("the the the", &["the cat"]) - expected).abs() < 1e-9);
}

/// Clipped matches counted from scratch: for every distinct n-gram of the
/// hypothesis, min(count in hyp, max count in any reference).
fn brute_clipped(hyp: &[&str], refs: &[Vec<&str>], n: usize) -> (usize, usize) {
    let grams = |s: &[&str]| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].iter().map(|w| w.to_string()).collect()).collect()
    };
    let h = grams(hyp);
    let distinct: BTreeSet<&Vec<String>> = h.iter().collect();
    let mut matched = 0;
    for g in distinct {
        let in_hyp = h.iter().filter(|x| *x == g).count();
        let in_ref = refs.iter().map(|r| grams(r).iter().filter(|x| *x == g).count()).max().unwrap_or(0);
        matched += in_hyp.min(in_ref);
    }
    (matched, h.len())
}

fn random_words(rng: &mut ChaCha8Rng, max: usize) -> Vec<&'static str> {
    const W: [&str; 4] = ["a", "b", "c", "d"];
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| W[rng.gen_range(0..W.len())]).collect()
}

fn brevity(c: usize, refs: &[Vec<&str>]) -> f64 {
    let r = refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).unwrap();
    if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

#[test]
fn clipped_counts_match_a_brute_force_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let hyp = random_words(&mut rng, 8);
        let refs: Vec<Vec<&str>> = (0..rng.gen_range(1..3)).map(|_| random_words(&mut rng, 8)).collect();
        for n in 1..=MAX_ORDER {
            assert_eq!(clipped_counts(&hyp, &refs, n), brute_clipped(&hyp, &refs, n));
        }
    }
}

#[test]
fn deleting_a_matched_unigram_never_raises_precision_or_brevity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..2000 {
        let hyp = random_words(&mut rng, 8);
        let refs = vec![random_words(&mut rng, 8)];
        if hyp.len() < 2 {
            continue;
        }
        for i in 0..hyp.len() {
            // Matched: every occurrence of the word is covered by the reference,
            // so removing one lowers the clipped match count.
            let w = hyp[i];
            let in_hyp = hyp.iter().filter(|x| **x == w).count();
            let in_ref = refs[0].iter().filter(|x| **x == w).count();
            if in_hyp > in_ref {
                continue;
            }
            let mut shorter = hyp.clone();
            shorter.remove(i);
            let (m0, t0) = brute_clipped(&hyp, &refs, 1);
            let (m1, t1) = brute_clipped(&shorter, &refs, 1);
            assert_eq!(m1 + 1, m0);
            assert!(m1 as f64 / t1 as f64 <= m0 as f64 / t0 as f64);
            assert!(brevity(shorter.len(), &refs) <= brevity(hyp.len(), &refs));
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn deleting_a_matched_token_can_still_raise_bleu() {
    // Removing "d" also removes the unmatched n-grams "c d", "b c d" and
    // "a b c d", which outweighs the lost unigram and the brevity penalty.
    let before = bleu_str("a b c d", &["a b c q d"]);
    let after = bleu_str("a b c", &["a b c q d"]);
    let b = (1.0f64 - 5.0 / 4.0).exp() * (1.0f64 * 2.0 / 3.0 * 1.0 / 2.0 * 1.0 / 2.0).powf(0.25);
    let a = (1.0f64 - 5.0 / 3.0).exp();
    assert!((before - 100.0 * b).abs() < 1e-9);
    assert!((after - 100.0 * a).abs() < 1e-9);
    assert!(after > before);
}

#[test]
fn kneser_ney_hand_example() {
    // Corpus "a a a a", order 3, discount 3/4, V = {a, </s>, <unk>}:
    //   P(a | <s> <s>) = 49/64, P(a | <s> a) = 25/32, P(</s> | a a) = 3/16.
    let lm = NGramLm::train(&["a a a a"], 3);
    assert_eq!(DISCOUNT, 0.75);
    assert!((lm.prob(&["<s>", "<s>"], "a") - 49.0 / 64.0).abs() < 1e-9);
    assert!((lm.prob(&["<s>", "a"], "a") - 25.0 / 32.0).abs() < 1e-9);
    assert!((lm.prob(&["a", "a"], EOS) - 3.0 / 16.0).abs() < 1e-9);
    let expected = (49.0f64 / 64.0 * 25.0 / 32.0 * 3.0 / 16.0).powf(-1.0 / 3.0);
    assert!((lm.perplexity(&["a a"]) - expected).abs() < 1e-9);
}

#[test]
fn uniform_model_has_perplexity_equal_to_vocabulary_size() {
    let v = 37.0f64;
    let ppl = perplexity_of(&["x y z", "w", "p q"], |s| {
        let n = s.split_whitespace().count() + 1;
        (n as f64 * -v.ln(), n)
    });
    assert!((ppl - v).abs() < 1e-9);
}

/// Interpolated Kneser-Ney written directly from its definition over word
/// strings: raw counts at the top order, distinct-left-context counts below,
/// uniform over the vocabulary at the bottom.
struct KnOracle {
    tables: Vec<BTreeMap<Vec<String>, f64>>,
    vocab: Vec<String>,
}

impl KnOracle {
    fn new(sentences: &[&str]) -> Self {
        let mut top: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        let mut words = BTreeSet::new();
        for s in sentences {
            let mut t = vec!["<s>".to_string(), "<s>".to_string()];
            t.extend(s.split_whitespace().map(str::to_string));
            t.push("</s>".into());
            for w in &t[2..] {
                words.insert(w.clone());
            }
            for i in 2..t.len() {
                *top.entry(t[i - 2..=i].to_vec()).or_default() += 1.0;
            }
        }
        words.insert("<unk>".into());
        let lower = |upper: &BTreeMap<Vec<String>, f64>| {
            let mut out: BTreeMap<Vec<String>, f64> = BTreeMap::new();
            for g in upper.keys() {
                *out.entry(g[1..].to_vec()).or_default() += 1.0;
            }
            out
        };
        let bi = lower(&top);
        let uni = lower(&bi);
        Self {
            tables: vec![uni, bi, top],
            vocab: words.into_iter().collect(),
        }
    }

    fn prob(&self, ctx: &[&str], w: &str) -> f64 {
        let mut p = 1.0 / self.vocab.len() as f64;
        for k in 0..3 {
            let h: Vec<String> = ctx[ctx.len() - k..].iter().map(|s| s.to_string()).collect();
            let table = &self.tables[k];
            let rows: Vec<(&Vec<String>, &f64)> = table.iter().filter(|(g, _)| g[..k] == h[..]).collect();
            let total: f64 = rows.iter().map(|(_, c)| **c).sum();
            if total == 0.0 {
                continue;
            }
            let types = rows.len() as f64;
            let c = rows.iter().find(|(g, _)| g[k] == w).map(|(_, c)| **c).unwrap_or(0.0);
            p = (c - DISCOUNT).max(0.0) / total + DISCOUNT * types / total * p;
        }
        p
    }
}

const TEN: [&str; 10] = [
    "the cat sat on the mat",
    "the dog sat on the log",
    "a cat and a dog",
    "the mat was red",
    "on the log a cat sat",
    "dogs and cats",
    "the red dog",
    "a log",
    "the cat",
    "sat sat sat",
];

#[test]
fn kneser_ney_matches_the_definition_and_sums_to_one() {
    let lm = NGramLm::train(&TEN, 3);
    let oracle = KnOracle::new(&TEN);
    let vocab = lm.vocab();
    assert_eq!(vocab, oracle.vocab.iter().map(String::as_str).collect::<Vec<_>>());

    let mut contexts: Vec<Vec<&str>> = lm.contexts();
    let seen: BTreeSet<&[String]> = oracle.tables[2].keys().map(|g| &g[..2]).collect();
    assert_eq!(contexts.len(), seen.len());
    // Histories never seen in training back off all the way.
    contexts.push(vec!["mat", "cat"]);
    contexts.push(vec!["<unk>", "<unk>"]);
    contexts.push(vec!["red", "the"]);
    for ctx in &contexts {
        let mut sum = 0.0;
        let mut oracle_sum = 0.0;
        for w in &vocab {
            let p = lm.prob(ctx, w);
            let q = oracle.prob(ctx, w);
            assert!((p - q).abs() < 1e-12, "P({w} | {ctx:?}): {p} vs {q}");
            sum += p;
            oracle_sum += q;
        }
        assert!((sum - 1.0).abs() < 1e-9, "context {ctx:?} sums to {sum}");
        assert!((oracle_sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn perplexity_is_finite_for_unseen_words() {
    let lm = NGramLm::train(&TEN, 3);
    for s in ["zebra", "the zebra sat", "cat cat cat cat cat"] {
        let ppl = lm.perplexity(&[s]);
        assert!(ppl.is_finite() && ppl >= 1.0, "{s}: {ppl}");
    }
}

fn synthetic() -> (tempfile::TempDir, SynthSpec) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    synth_corpus(&spec, dir.path()).unwrap();
    (dir, spec)
}

#[test]
fn classifier_separates_the_synthetic_styles() {
    let (dir, spec) = synthetic();
    let vocab = build_vocab(dir.path(), 2, 1).unwrap();
    let data = load_dataset(dir.path(), &vocab, 2, 32).unwrap();
    let text = |e: &pst_core::corpus::Example| vocab.detokenize(&e.tokens);
    let train: Vec<(String, usize)> = data.train.iter().map(|e| (text(e), e.style)).collect();
    let clf = StyleClassifier::train(&train, 2, &ClassifierConfig::default());

    let (t, l): (Vec<String>, Vec<usize>) = train.iter().cloned().unzip();
    assert!(clf.accuracy(&t, &l) >= 99.0);
    let test_t: Vec<String> = data.test.iter().map(text).collect();
    let test_l: Vec<usize> = data.test.iter().map(|e| e.style).collect();
    assert!(clf.accuracy(&test_t, &test_l) >= 95.0);

    // Replacing every style word by its counterpart should flip the label.
    let mut flipped = 0;
    for (s, &style) in test_t.iter().zip(&test_l) {
        let swapped: Vec<String> = s
            .split_whitespace()
            .map(|w| match spec.lexicons[style].iter().position(|x| x == w) {
                Some(i) => spec.lexicons[1 - style][i].clone(),
                None => w.to_string(),
            })
            .collect();
        if clf.predict(&swapped.join(" ")) == 1 - style {
            flipped += 1;
        }
    }
    assert!(flipped as f64 / test_t.len() as f64 >= 0.95, "{flipped} of {}", test_t.len());
}

#[test]
fn identity_transfer_copies_and_misses_the_target_style() {
    let (dir, _) = synthetic();
    let vocab = build_vocab(dir.path(), 2, 1).unwrap();
    let data = load_dataset(dir.path(), &vocab, 2, 32).unwrap();
    let suite = EvalSuite::train(&data.train, &vocab, 2, 0);
    let r = evaluate(&suite, &Identity, &data.test, &vocab, 2).unwrap();
    assert_eq!(r.self_bleu, 100.0);
    assert!(r.acc <= 5.0, "identity ACC {}", r.acc);
    assert!(r.ref_bleu.is_none());
    assert!(r.ppl.is_finite() && r.ppl >= 1.0);

    // Accuracy does not depend on the order of the test set.
    let mut reversed = data.test.clone();
    reversed.reverse();
    let r2 = evaluate(&suite, &Identity, &reversed, &vocab, 2).unwrap();
    assert_eq!(r.acc, r2.acc);
}
