//! Binding of stored parameters into a graph for one computation.

use pst_autodiff::{Graph, Scalar, Tensor, Var};

use crate::error::Result;
use crate::params::{Group, ParamId, ParamStore};

/// Counters observed by tests and logs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    /// Backbone passes run to extract a content prefix.
    pub content_passes: usize,
    pub backbone_forwards: usize,
}

/// A graph plus lazily bound parameters. Parameters of trainable groups
/// become gradient leaves; all others are bound as constants.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    trainable: [bool; 3],
    bound: Vec<Option<Var>>,
    pub stats: Stats,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, trainable: &[Group]) -> Self {
        let mut mask = [false; 3];
        for grp in trainable {
            mask[grp.index()] = true;
        }
        Self {
            g,
            store,
            trainable: mask,
            bound: vec![None; store.len()],
            stats: Stats::default(),
        }
    }

    /// Uses `var` for parameter `id` instead of binding it from the store.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.index()] = Some(var);
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable[group.index()]
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let grad = self.trainable[self.store.group(id).index()];
        let v = self.g.leaf(value, grad);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Gradients of `loss` for every bound parameter in a trainable group.
    /// Trainable parameters never touched by the computation get zeros.
    pub fn gradients(&self, loss: Var, group: Group) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.g.backward(loss)?;
        let mut out = Vec::new();
        for id in self.store.ids_in(group) {
            let g = match self.bound[id.index()] {
                Some(v) if self.g.requires_grad(v) => grads.take(v),
                _ => None,
            };
            let g = g.unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
            out.push((id, g));
        }
        Ok(out)
    }
}
