//! Shapes, causality and prefix plumbing of the generator.

mod common;

use common::{random_sentences, tiny_config, tiny_store};
use pst_autodiff::{Graph, Scalar, Tensor};
use pst_core::backbone::{one_hot, Backbone, Input, PrefixBlock, PrefixSource};
use pst_core::corpus::SEP;
use pst_core::ctx::Ctx;
use pst_core::discriminator::Discriminator;
use pst_core::losses::generator_objective;
use pst_core::params::ParamStore;
use pst_core::prefix::Generator;
use pst_core::RunConfig;

fn final_states<T: Scalar>(store: &ParamStore<T>, bb: &Backbone, ids: &[usize]) -> Tensor<T> {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, &[]);
    let mut kv = bb.attach(&mut cx, &[]).unwrap();
    let x = bb.embed_at(&mut cx, Input::Hard(ids), 0).unwrap();
    let h = bb.forward(&mut cx, &mut kv, x).unwrap();
    cx.g.value(h).clone()
}

#[test]
fn content_prefix_has_one_row_per_token() {
    let cfg = tiny_config();
    let store = tiny_store::<f32>(&cfg, 1);
    let gen = Generator::new(&store, &cfg).unwrap();
    let d = cfg.model.model_dim;
    for x in random_sentences(2, 50, cfg.model.vocab_size, 20) {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, &[]);
        let fixed = gen.fixed(&mut cx).unwrap();
        let c = gen.content(&mut cx, &fixed, Input::Hard(&x)).unwrap().unwrap();
        assert_eq!(c.len, x.len());
        assert_eq!(c.layers.len(), cfg.model.num_layers);
        for &(k, v) in &c.layers {
            assert_eq!(cx.g.shape(k), &[x.len(), d]);
            assert_eq!(cx.g.shape(v), &[x.len(), d]);
        }
    }
}

#[test]
fn assembled_prefix_is_shared_style_content() {
    let cfg = tiny_config();
    assert_eq!((cfg.prefix.shared_len, cfg.prefix.style_len), (10, 20));
    let store = tiny_store::<f32>(&cfg, 1);
    let gen = Generator::new(&store, &cfg).unwrap();
    for x in random_sentences(3, 50, cfg.model.vocab_size, 20) {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, &[]);
        let fixed = gen.fixed(&mut cx).unwrap();
        let c = gen.content(&mut cx, &fixed, Input::Hard(&x)).unwrap();
        let kv = gen.condition(&mut cx, &fixed, c.as_ref(), 1, Input::Hard(&x)).unwrap();
        assert_eq!(kv.prefix_len, 10 + 20 + x.len());
        assert_eq!(gen.prefix_len(x.len()), 10 + 20 + x.len());
        assert_eq!(kv.len, kv.prefix_len + x.len());
    }

    let mut no_style = tiny_config();
    no_style.ablation.disable_style_prefix = true;
    let gen = Generator::new(&store, &no_style).unwrap();
    assert_eq!(gen.prefix_len(7), 10 + 7);
}

#[test]
fn later_tokens_never_change_earlier_states() {
    let cfg = tiny_config();
    let store = tiny_store::<f64>(&cfg, 4);
    let bb = Backbone::new(&store, &cfg.model).unwrap();
    let d = cfg.model.model_dim;
    let x: Vec<usize> = vec![5, 9, 6, 13, 7, 11, 8, 19];
    let base = final_states(&store, &bb, &x);
    for j in 0..x.len() {
        let mut y = x.clone();
        y[j] = if x[j] == 17 { 18 } else { 17 };
        let out = final_states(&store, &bb, &y);
        for i in 0..x.len() {
            let same = base.data()[i * d..(i + 1) * d] == out.data()[i * d..(i + 1) * d];
            if i < j {
                assert!(same, "position {i} changed when token {j} was replaced");
            } else if i == j {
                assert!(!same, "position {j} ignored its own token");
            }
        }
    }
}

fn soft_matches_hard<T: Scalar>(cfg: &RunConfig) {
    let store = tiny_store::<T>(cfg, 8);
    let bb = Backbone::new(&store, &cfg.model).unwrap();
    for x in random_sentences(9, 10, cfg.model.vocab_size, 12) {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, &[]);
        let mut kv_h = bb.attach(&mut cx, &[]).unwrap();
        let xh = bb.embed_at(&mut cx, Input::Hard(&x), 0).unwrap();
        let hh = bb.forward(&mut cx, &mut kv_h, xh).unwrap();
        let lh = bb.logits(&mut cx, hh).unwrap();

        let probs = cx.constant(one_hot::<T>(&x, cfg.model.vocab_size));
        let mut kv_s = bb.attach(&mut cx, &[]).unwrap();
        let xs = bb.embed_at(&mut cx, Input::Soft(probs), 0).unwrap();
        let hs = bb.forward(&mut cx, &mut kv_s, xs).unwrap();
        let ls = bb.logits(&mut cx, hs).unwrap();
        assert!(cx.g.value(lh).bit_eq(cx.g.value(ls)), "soft one-hot logits differ for {x:?}");
    }
}

#[test]
fn one_hot_soft_input_reproduces_hard_logits_bitwise() {
    let tiny = tiny_config();
    soft_matches_hard::<f32>(&tiny);
    soft_matches_hard::<f64>(&tiny);
    // Wider model, so products go through the blocked matrix kernels.
    let mut wide = RunConfig::default();
    wide.model.vocab_size = 60;
    soft_matches_hard::<f32>(&wide);
}

#[test]
fn injected_key_values_act_like_real_context() {
    // Keys and values computed for a context sentence, handed back to the
    // model as a prefix block, must give the same continuation states as
    // running the context itself.
    let cfg = tiny_config();
    let store = tiny_store::<f64>(&cfg, 6);
    let bb = Backbone::new(&store, &cfg.model).unwrap();
    let context = [7usize, 12, 9, 15];
    let target = [SEP, 8, 10, 11];

    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, &[]);
    let kv = bb.condition(&mut cx, &[], None, Some(Input::Hard(&context))).unwrap();
    let mut kv_a = kv.clone();
    let xa = bb.embed_at(&mut cx, Input::Hard(&target), 0).unwrap();
    let ha = bb.forward(&mut cx, &mut kv_a, xa).unwrap();

    let layers = (0..cfg.model.num_layers)
        .map(|l| {
            let (k, v) = kv.layer(l);
            (k.unwrap(), v.unwrap())
        })
        .collect();
    let block = PrefixBlock {
        source: PrefixSource::Content,
        len: context.len(),
        layers,
    };
    let mut kv_b = bb.attach(&mut cx, &[&block]).unwrap();
    let xb = bb.embed_at(&mut cx, Input::Hard(&target), 0).unwrap();
    let hb = bb.forward(&mut cx, &mut kv_b, xb).unwrap();
    assert!(cx.g.value(ha).bit_eq(cx.g.value(hb)));
}

fn content_passes(cfg: &RunConfig) -> usize {
    let store = tiny_store::<f32>(cfg, 2);
    let gen = Generator::new(&store, cfg).unwrap();
    let dis = Discriminator::new(&store, cfg).unwrap();
    let xs = random_sentences(4, 3, cfg.model.vocab_size, 6);
    let rows: Vec<&[usize]> = xs.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, &[]);
    generator_objective(&mut cx, &gen, &dis, &cfg.loss, &rows, &[0, 1, 0], &[1, 0, 1]).unwrap();
    cx.stats.content_passes
}

#[test]
fn disabling_the_content_prefix_skips_the_extra_pass() {
    let cfg = tiny_config();
    // One pass over X and one over the soft transfer Y, per sentence.
    assert_eq!(content_passes(&cfg), 6);
    let mut off = tiny_config();
    off.ablation.disable_content_prefix = true;
    assert_eq!(content_passes(&off), 0);
}
