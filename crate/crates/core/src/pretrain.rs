//! On-corpus pretraining of the backbone, which is frozen afterwards.
//!
//! Two sequence layouts are mixed: a plain sentence `<bos> X -> X <eos>`
//! and a conditioned one where `X` is read as context and then reproduced
//! after the separator, `X <sep> X -> X <eos>`. The second layout is the
//! one the generator uses, so the frozen model already knows how to read a
//! context sentence and continue after the separator.

use pst_autodiff::{Graph, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Input};
use crate::config::RunConfig;
use crate::corpus::{BatchIterator, Example, BOS, SEP};
use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::losses::recon_target;
use crate::optim::Adam;
use crate::params::{Group, ParamStore};

/// Summed next-token loss of one sentence in either layout, and the number
/// of scored tokens.
pub fn lm_terms<T: Scalar>(cx: &mut Ctx<'_, T>, backbone: &Backbone, x: &[usize], conditioned: bool) -> Result<(Var, usize)> {
    let goal = recon_target(x);
    let loss = if conditioned {
        let kv = backbone.condition(cx, &[], None, Some(Input::Hard(x)))?;
        backbone.nll(cx, &kv, SEP, &goal)?
    } else {
        let kv = backbone.attach(cx, &[])?;
        backbone.nll(cx, &kv, BOS, &goal)?
    };
    Ok((loss, goal.len()))
}

pub struct Pretrainer {
    adam: Adam<f32>,
    frozen: bool,
    copy_fraction: f64,
    seed: u64,
}

impl Pretrainer {
    pub fn new(cfg: &RunConfig, store: &ParamStore<f32>) -> Self {
        Self {
            adam: Adam::new(&cfg.optim, cfg.pretrain.lr, store.ids_in(Group::Backbone), store),
            frozen: false,
            copy_fraction: cfg.pretrain.copy_fraction,
            seed: cfg.seed,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.step
    }

    /// Ends the pretraining phase; later steps are refused.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// One Adam step on the mean per-token loss of `batch`.
    pub fn step(&mut self, store: &mut ParamStore<f32>, backbone: &Backbone, batch: &[&[usize]]) -> Result<f64> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.adam.step + 1).wrapping_mul(0xA076_1D64_78BD_642F));
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, store, &[Group::Backbone]);
        let mut total: Option<Var> = None;
        let mut tokens = 0;
        for x in batch {
            let conditioned = rng.gen::<f64>() < self.copy_fraction;
            let (l, n) = lm_terms(&mut cx, backbone, x, conditioned)?;
            tokens += n;
            total = Some(match total {
                Some(acc) => cx.g.add(acc, l)?,
                None => l,
            });
        }
        let loss = cx.g.scale(total.expect("non-empty"), 1.0 / tokens as f64);
        let value = cx.g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "pretraining loss".into(),
                step: self.adam.step + 1,
            });
        }
        let grads = cx.gradients(loss, Group::Backbone)?;
        drop(cx);
        self.adam.update(store, &grads)?;
        Ok(value)
    }
}

/// Runs `cfg.pretrain.steps` steps over `train` and returns the loss trace.
pub fn pretrain(
    cfg: &RunConfig,
    store: &mut ParamStore<f32>,
    train: &[Example],
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let backbone = Backbone::new(store, &cfg.model)?;
    let mut trainer = Pretrainer::new(cfg, store);
    let mut it = BatchIterator::new(train.len(), cfg.pretrain.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.pretrain.steps);
    for step in 0..cfg.pretrain.steps {
        let idx = it.next_batch();
        let batch: Vec<&[usize]> = idx.iter().map(|&i| train[i].tokens.as_slice()).collect();
        let loss = trainer.step(store, &backbone, &batch)?;
        trace.push(loss);
        progress(step + 1, loss);
    }
    trainer.freeze();
    Ok(trace)
}
