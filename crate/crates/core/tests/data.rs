//! Corpus loading, batching, synthetic data and backbone pretraining.

mod common;

use std::fs;
use std::path::Path;

use common::{tiny_config, tiny_store};
use pst_core::backbone::Backbone;
use pst_core::corpus::{build_vocab, load_dataset, split_path, BatchIterator, SPLITS};
use pst_core::params::Group;
use pst_core::pretrain::{pretrain, Pretrainer};
use pst_core::synth::{synth_corpus, synth_files, SynthSpec};
use pst_core::Error;

fn write_split_files(dir: &Path, lines: [&str; 2]) {
    for split in SPLITS {
        for (style, text) in lines.iter().enumerate() {
            fs::write(split_path(dir, split, style), text).unwrap();
        }
    }
}

#[test]
fn two_files_of_three_lines_give_six_labelled_items() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), ["a b\nc d\ne f\n", "g h\n\ni j\n  \nk l\n"]);
    let vocab = build_vocab(dir.path(), 2, 1).unwrap();
    let data = load_dataset(dir.path(), &vocab, 2, 32).unwrap();
    assert_eq!(data.train.len(), 6);
    let labels: Vec<usize> = data.train.iter().map(|e| e.style).collect();
    assert_eq!(labels, [0, 0, 0, 1, 1, 1]);
    assert_eq!(vocab.detokenize(&data.train[4].tokens), "i j");
}

#[test]
fn missing_file_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(split_path(dir.path(), "train", 0), "a b\n").unwrap();
    let err = build_vocab(dir.path(), 2, 1).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("train.1.txt"), "{err}");
}

#[test]
fn long_sentences_are_truncated() {
    let dir = tempfile::tempdir().unwrap();
    write_split_files(dir.path(), ["a b c d e f g\n", "h i\n"]);
    let vocab = build_vocab(dir.path(), 2, 1).unwrap();
    let data = load_dataset(dir.path(), &vocab, 2, 4).unwrap();
    assert_eq!(vocab.detokenize(&data.test[0].tokens), "a b c d");
    assert_eq!(data.test[1].tokens.len(), 2);
}

#[test]
fn twenty_items_in_batches_of_eight() {
    let mut it = BatchIterator::new(20, 8, 5);
    let sizes: Vec<usize> = (0..3).map(|_| it.next_batch().len()).collect();
    assert_eq!(sizes, [8, 8, 4]);

    let order = |seed| {
        let mut it = BatchIterator::new(20, 8, seed);
        (0..6).flat_map(|_| it.next_batch()).collect::<Vec<_>>()
    };
    assert_eq!(order(5), order(5));
    assert_ne!(order(5), order(6));
}

#[test]
fn synthetic_corpus_is_reproducible_byte_for_byte() {
    let mut spec = SynthSpec::default();
    spec.seed = 42;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let names = synth_corpus(&spec, a.path()).unwrap();
    assert_eq!(synth_corpus(&spec, b.path()).unwrap(), names);
    for name in &names {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn every_synthetic_sentence_carries_a_word_of_its_style() {
    let spec = SynthSpec::default();
    for (name, text) in synth_files(&spec).unwrap() {
        let style: usize = match name.split('.').nth(1).and_then(|s| s.parse().ok()) {
            Some(s) if !name.contains(".ref.") => s,
            _ => continue,
        };
        for line in text.lines() {
            let words: Vec<&str> = line.split_whitespace().collect();
            assert!(words.iter().any(|w| spec.lexicons[style].iter().any(|l| l == w)), "{name}: {line}");
            assert!(!words.iter().any(|w| spec.lexicons[1 - style].iter().any(|l| l == w)), "{name}: {line}");
        }
    }
}

fn small_corpus() -> (tempfile::TempDir, pst_core::RunConfig, pst_core::corpus::Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::default();
    spec.train_per_style = 25;
    spec.dev_per_style = 2;
    spec.test_per_style = 2;
    synth_corpus(&spec, dir.path()).unwrap();
    let vocab = build_vocab(dir.path(), 2, 1).unwrap();
    let mut cfg = tiny_config();
    cfg.model.vocab_size = vocab.len();
    cfg.pretrain.steps = 100;
    let data = load_dataset(dir.path(), &vocab, 2, cfg.max_sentence_len).unwrap();
    (dir, cfg, data)
}

#[test]
fn pretraining_starts_near_uniform_and_improves() {
    let (_dir, cfg, data) = small_corpus();
    assert_eq!(data.train.len(), 50);
    let mut store = tiny_store::<f32>(&cfg, 7);
    let trace = pretrain(&cfg, &mut store, &data.train, |_, _| {}).unwrap();
    assert_eq!(trace.len(), 100);
    let ln_v = (cfg.model.vocab_size as f64).ln();
    assert!((trace[0] - ln_v).abs() < 0.2, "initial loss {} vs ln V {ln_v}", trace[0]);
    // Single steps are noisy; means over blocks of ten must fall every time.
    let blocks: Vec<f64> = trace.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "{blocks:?}");

    let mut again = tiny_store::<f32>(&cfg, 7);
    let trace2 = pretrain(&cfg, &mut again, &data.train, |_, _| {}).unwrap();
    let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&trace), bits(&trace2));
    assert!(store.group_bit_eq(&again, Group::Backbone));
}

#[test]
fn frozen_pretrainer_refuses_to_step() {
    let (_dir, cfg, data) = small_corpus();
    let mut store = tiny_store::<f32>(&cfg, 7);
    let before = store.clone();
    let backbone = Backbone::new(&store, &cfg.model).unwrap();
    let mut p = Pretrainer::new(&cfg, &store);
    p.freeze();
    let batch = [data.train[0].tokens.as_slice()];
    assert!(matches!(p.step(&mut store, &backbone, &batch), Err(Error::Frozen)));
    assert!(store.group_bit_eq(&before, Group::Backbone));
}
