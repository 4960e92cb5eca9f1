//! Automatic transfer metrics: target-style accuracy under an independently
//! trained classifier, BLEU against the input (self) and against human
//! references (ref), and trigram language-model perplexity.

pub mod bleu;
pub mod classifier;
pub mod ngram;

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Example, Vocab};
use crate::error::{io_err, Error, Result};

use classifier::{ClassifierConfig, StyleClassifier};
use ngram::NGramLm;

pub const LM_ORDER: usize = 3;

/// Anything that rewrites a sentence into a target style.
pub trait Transfer {
    fn transfer(&self, x: &[usize], target: usize) -> Result<Vec<usize>>;
}

/// Returns the input unchanged.
pub struct Identity;

impl Transfer for Identity {
    fn transfer(&self, x: &[usize], _target: usize) -> Result<Vec<usize>> {
        Ok(x.to_vec())
    }
}

/// Metric models trained on a corpus's training split.
pub struct EvalSuite {
    pub classifier: StyleClassifier,
    pub lm: NGramLm,
}

impl EvalSuite {
    pub fn train(train: &[Example], vocab: &Vocab, num_styles: usize, seed: u64) -> Self {
        let texts: Vec<(String, usize)> = train.iter().map(|e| (vocab.detokenize(&e.tokens), e.style)).collect();
        let cfg = ClassifierConfig {
            seed,
            ..ClassifierConfig::default()
        };
        let classifier = StyleClassifier::train(&texts, num_styles, &cfg);
        let sentences: Vec<&str> = texts.iter().map(|(t, _)| t.as_str()).collect();
        let lm = NGramLm::train(&sentences, LM_ORDER);
        Self { classifier, lm }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub config_hash: String,
    pub checkpoint: String,
    pub sentences: usize,
    pub acc: f64,
    pub self_bleu: f64,
    pub ref_bleu: Option<f64>,
    pub ppl: f64,
}

impl MetricsReport {
    /// Plain-text record. Field order: `config_hash`, `checkpoint`,
    /// `sentences`, `acc`, `self_bleu`, `ref_bleu` (only when references were
    /// given), `ppl`. Floats are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# pst evaluation report");
        let _ = writeln!(s, "# bleu: {}", bleu::CONVENTION);
        let _ = writeln!(s, "# ppl: order-{LM_ORDER} interpolated Kneser-Ney, discount {}", ngram::DISCOUNT);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint);
        let _ = writeln!(s, "sentences = {}", self.sentences);
        let _ = writeln!(s, "acc = {:?}", self.acc);
        let _ = writeln!(s, "self_bleu = {:?}", self.self_bleu);
        if let Some(r) = self.ref_bleu {
            let _ = writeln!(s, "ref_bleu = {r:?}");
        }
        let _ = writeln!(s, "ppl = {:?}", self.ppl);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self {
            config_hash: String::new(),
            checkpoint: String::new(),
            sentences: 0,
            acc: f64::NAN,
            self_bleu: f64::NAN,
            ref_bleu: None,
            ppl: f64::NAN,
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: "<report>".into(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("bad line `{line}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}`")));
            match k {
                "config_hash" => r.config_hash = v.to_string(),
                "checkpoint" => r.checkpoint = v.to_string(),
                "sentences" => r.sentences = v.parse().map_err(|_| bad(format!("bad count `{v}`")))?,
                "acc" => r.acc = num(v)?,
                "self_bleu" => r.self_bleu = num(v)?,
                "ref_bleu" => r.ref_bleu = Some(num(v)?),
                "ppl" => r.ppl = num(v)?,
                _ => return Err(bad(format!("unknown field `{k}`"))),
            }
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Outputs of a transfer run over a test set, each sentence sent to the
/// other style (binary case: `1 - style`).
pub struct Transcript {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub targets: Vec<usize>,
    pub references: Option<Vec<String>>,
}

pub fn run_transfer(model: &dyn Transfer, test: &[Example], vocab: &Vocab, num_styles: usize) -> Result<Transcript> {
    let mut t = Transcript {
        inputs: Vec::with_capacity(test.len()),
        outputs: Vec::with_capacity(test.len()),
        targets: Vec::with_capacity(test.len()),
        references: if !test.is_empty() && test.iter().all(|e| e.reference.is_some()) {
            Some(Vec::new())
        } else {
            None
        },
    };
    for e in test {
        let target = (e.style + 1) % num_styles;
        let y = model.transfer(&e.tokens, target)?;
        t.inputs.push(vocab.detokenize(&e.tokens));
        t.outputs.push(vocab.detokenize(&y));
        t.targets.push(target);
        if let Some(r) = t.references.as_mut() {
            r.push(e.reference.clone().unwrap_or_default());
        }
    }
    Ok(t)
}

pub fn score(suite: &EvalSuite, t: &Transcript) -> MetricsReport {
    let acc = suite.classifier.accuracy(&t.outputs, &t.targets);
    let self_refs: Vec<Vec<String>> = t.inputs.iter().map(|i| vec![i.clone()]).collect();
    let self_bleu = bleu::corpus_bleu(&t.outputs, &self_refs);
    let ref_bleu = t.references.as_ref().map(|refs| {
        let refs: Vec<Vec<String>> = refs.iter().map(|r| vec![r.clone()]).collect();
        bleu::corpus_bleu(&t.outputs, &refs)
    });
    MetricsReport {
        config_hash: String::new(),
        checkpoint: String::new(),
        sentences: t.outputs.len(),
        acc,
        self_bleu,
        ref_bleu,
        ppl: suite.lm.perplexity(&t.outputs),
    }
}

/// Transfers every test sentence to the other style and scores the outputs.
pub fn evaluate(suite: &EvalSuite, model: &dyn Transfer, test: &[Example], vocab: &Vocab, num_styles: usize) -> Result<MetricsReport> {
    let t = run_transfer(model, test, vocab, num_styles)?;
    Ok(score(suite, &t))
}
