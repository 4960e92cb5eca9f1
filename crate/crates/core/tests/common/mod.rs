#![allow(dead_code)]

use std::path::Path;

use pst_autodiff::Scalar;
use pst_core::checkpoint::Checkpoint;
use pst_core::config::ModelConfig;
use pst_core::corpus::{build_vocab, load_dataset, Dataset};
use pst_core::model::backbone_checkpoint;
use pst_core::params::{param_specs, ParamStore};
use pst_core::synth::{synth_corpus, SynthSpec};
use pst_core::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two layers, two heads, width 16, twenty tokens.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        vocab_size: 20,
        max_positions: 128,
    };
    c.prefix.projection_hidden = 8;
    c.generation.extra_len = 3;
    c.schedule.batch_size = 4;
    c
}

pub fn tiny_store<T: Scalar>(cfg: &RunConfig, seed: u64) -> ParamStore<T> {
    ParamStore::init(&param_specs(cfg), seed)
}

/// Random non-reserved token ids, lengths `1..=max_len`.
pub fn random_sentences(seed: u64, count: usize, vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            (0..n).map(|_| rng.gen_range(5..vocab)).collect()
        })
        .collect()
}

/// Adds uniform noise in `[-scale, scale]` to every parameter, moving away
/// from the near-zero initial output layers.
pub fn jitter<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x = T::from_f64(x.to_f64() + rng.gen_range(-scale..=scale));
        }
    }
}

/// A small synthetic corpus in `dir`, a tiny model sized to its vocabulary
/// and a randomly initialized backbone checkpoint.
pub fn tiny_run(dir: &Path) -> (RunConfig, Checkpoint, Dataset) {
    let mut spec = SynthSpec::default();
    spec.train_per_style = 24;
    spec.dev_per_style = 6;
    spec.test_per_style = 6;
    synth_corpus(&spec, dir).unwrap();
    let vocab = build_vocab(dir, 2, 1).unwrap();
    let mut cfg = tiny_config();
    cfg.model.vocab_size = vocab.len();
    cfg.schedule.checkpoint_every = 15;
    cfg.schedule.select_dev_per_style = 3;
    let data = load_dataset(dir, &vocab, 2, cfg.max_sentence_len).unwrap();
    let store = tiny_store::<f32>(&cfg, 21);
    let ck = backbone_checkpoint(&cfg, &vocab, &store, 0);
    (cfg, ck, data)
}
