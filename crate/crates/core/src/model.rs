//! Loading parameters from checkpoints and running trained models.

use pst_autodiff::Tensor;

use crate::backbone::Decode;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::eval::Transfer;
use crate::params::{param_specs, Group, ParamStore};
use crate::prefix::Generator;

fn ck_err(msg: String) -> Error {
    Error::Checkpoint {
        path: String::new(),
        msg,
    }
}

/// Copies every parameter of `groups` from `ck` into `store`, checking shapes.
pub fn restore_params(store: &mut ParamStore<f32>, ck: &Checkpoint, groups: &[Group]) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        if !groups.contains(&store.group(id)) {
            continue;
        }
        let name = store.name(id).to_string();
        let t = ck
            .tensor(&name)
            .ok_or_else(|| ck_err(format!("missing tensor `{name}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(ck_err(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Every parameter of `groups`, named, for writing into a checkpoint.
pub fn export_params(store: &ParamStore<f32>, groups: &[Group]) -> Vec<(String, Tensor<f32>)> {
    store
        .ids()
        .filter(|&id| groups.contains(&store.group(id)))
        .map(|id| (store.name(id).to_string(), store.get(id).clone()))
        .collect()
}

/// Builds a fresh store for `cfg` and fills the backbone from `ck`.
pub fn store_with_backbone(cfg: &RunConfig, ck: &Checkpoint) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::init(&param_specs(cfg), cfg.seed);
    restore_params(&mut store, ck, &[Group::Backbone])?;
    Ok(store)
}

/// A trained generator ready for inference.
pub struct TransferModel {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub gen: Generator,
    pub decode: Decode,
    /// Overrides the default `|X| + extra_len` output budget.
    pub max_len: Option<usize>,
}

impl TransferModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("model") {
            return Err(ck_err("not a trained model checkpoint".into()));
        }
        let cfg = ck.config.clone();
        let mut store = ParamStore::init(&param_specs(&cfg), cfg.seed);
        restore_params(&mut store, ck, &Group::ALL)?;
        let gen = Generator::new(&store, &cfg)?;
        Ok(Self {
            cfg,
            vocab: ck.vocab.clone(),
            store,
            gen,
            decode: Decode::Greedy,
            max_len: None,
        })
    }

    pub fn transfer_text(&self, text: &str, target: usize) -> Result<String> {
        let mut ids = self.vocab.tokenize(text);
        ids.truncate(self.cfg.max_sentence_len);
        if ids.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let y = self.transfer(&ids, target)?;
        Ok(self.vocab.detokenize(&y))
    }
}

impl Transfer for TransferModel {
    fn transfer(&self, x: &[usize], target: usize) -> Result<Vec<usize>> {
        let max_len = self.max_len.unwrap_or_else(|| self.gen.max_len(x.len()));
        self.gen.transfer(&self.store, x, target, self.decode, max_len)
    }
}

/// Checkpoint of a pretrained backbone.
pub fn backbone_checkpoint(cfg: &RunConfig, vocab: &Vocab, store: &ParamStore<f32>, steps: u64) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.clone(), vocab.clone());
    ck.meta.insert("kind".into(), "backbone".into());
    ck.meta.insert("pretrain_steps".into(), steps.to_string());
    ck.tensors = export_params(store, &[Group::Backbone]);
    ck
}
