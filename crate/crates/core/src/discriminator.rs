//! Prefix-tuned three-way classifier over {style 0, style 1, fake} on the
//! frozen backbone.

use pst_autodiff::{Reduction, Scalar, Tensor, Var};

use crate::backbone::{Backbone, Input, PrefixBlock, PrefixSource};
use crate::config::RunConfig;
use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, PROJ_DIS};
use crate::prefix::{to_block, ProjIds};

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub backbone: Backbone,
    tokens: ParamId,
    proj: ProjIds,
    head_w: ParamId,
    head_b: ParamId,
    pub num_classes: usize,
}

impl Discriminator {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(store, &cfg.model)?,
            tokens: store.id("discriminator.tokens")?,
            proj: ProjIds::lookup(store, PROJ_DIS)?,
            head_w: store.id("discriminator.head.w")?,
            head_b: store.id("discriminator.head.b")?,
            num_classes: cfg.prefix.num_styles + 1,
        })
    }

    /// Index of the class marking generated sentences.
    pub fn fake_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn prefix<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Result<PrefixBlock> {
        let x = cx.p(self.tokens);
        let out = self.proj.apply(cx, x)?;
        to_block(cx, out, PrefixSource::Discriminator, self.backbone.cfg.num_layers, self.backbone.cfg.model_dim)
    }

    /// Class logits `1 x C` from the mean input embedding next to the mean
    /// last-layer state.
    pub fn logits<T: Scalar>(&self, cx: &mut Ctx<'_, T>, prefix: &PrefixBlock, input: Input<'_>) -> Result<Var> {
        let n = match input {
            Input::Hard(ids) => ids.len(),
            Input::Soft(v) => cx.g.shape(v)[0],
        };
        if n == 0 {
            return Err(Error::Empty("sentence"));
        }
        let mut kv = self.backbone.attach(cx, &[prefix])?;
        let x = self.backbone.embed(cx, input)?;
        let xp = self.backbone.add_positions(cx, x, 0)?;
        let h = self.backbone.forward(cx, &mut kv, xp)?;
        self.head(cx, x, h)
    }

    /// Mean-pools embeddings and states (both `n x d`) and applies the
    /// linear head to their concatenation. The pooled embedding is
    /// normalized to the scale of the layer-normed states.
    pub fn head<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, h: Var) -> Result<Var> {
        let d = self.backbone.cfg.model_dim;
        let ex = cx.g.mean_axis(x, 0)?;
        let one = cx.constant(Tensor::full(&[d], T::ONE));
        let zero = cx.constant(Tensor::zeros(&[d]));
        let ex = cx.g.layer_norm(ex, one, zero)?;
        let eh = cx.g.mean_axis(h, 0)?;
        let pooled = cx.g.concat(&[ex, eh], 1)?;
        let (w, b) = (cx.p(self.head_w), cx.p(self.head_b));
        let o = cx.g.matmul(pooled, w)?;
        Ok(cx.g.add(o, b)?)
    }

    pub fn probs<T: Scalar>(&self, cx: &mut Ctx<'_, T>, prefix: &PrefixBlock, input: Input<'_>) -> Result<Var> {
        let l = self.logits(cx, prefix, input)?;
        Ok(cx.g.softmax(l))
    }

    /// `-log P(target | input)`.
    pub fn nll<T: Scalar>(&self, cx: &mut Ctx<'_, T>, prefix: &PrefixBlock, input: Input<'_>, target: usize) -> Result<Var> {
        let l = self.logits(cx, prefix, input)?;
        Ok(cx.g.cross_entropy(l, &[target], Reduction::Sum)?)
    }
}
