//! The generator's prefixes: shared, style, PRE_pre and content.
//!
//! Every prefix is produced by a two-layer projection network
//! `tanh(x W1 + b1) W2 + b2` that maps `d`-dimensional rows to the keys and
//! values of every layer (`2 L d` columns). The content prefix reruns the
//! frozen backbone on the input sentence behind PRE_pre and projects its
//! last-layer states.

use pst_autodiff::{Scalar, Var};

use crate::backbone::{Backbone, Input, KvState, PrefixBlock, PrefixSource};
use crate::config::{AblationFlags, RunConfig};
use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, PROJ_CONTENT, PROJ_MAIN, PROJ_PRE};

#[derive(Clone, Debug)]
pub struct ProjIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ProjIds {
    pub fn lookup<T: Scalar>(store: &ParamStore<T>, base: &str) -> Result<Self> {
        Ok(Self {
            w1: store.id(&format!("{base}.w1"))?,
            b1: store.id(&format!("{base}.b1"))?,
            w2: store.id(&format!("{base}.w2"))?,
            b2: store.id(&format!("{base}.b2"))?,
        })
    }

    /// Rows `P x d` to rows `P x 2Ld`.
    pub fn apply<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (cx.p(self.w1), cx.p(self.b1), cx.p(self.w2), cx.p(self.b2));
        let h = cx.g.matmul(x, w1)?;
        let h = cx.g.add(h, b1)?;
        let h = cx.g.tanh(h);
        let o = cx.g.matmul(h, w2)?;
        Ok(cx.g.add(o, b2)?)
    }
}

/// Splits projection output `P x 2Ld` into per-layer key and value rows.
pub fn to_block<T: Scalar>(cx: &mut Ctx<'_, T>, out: Var, source: PrefixSource, layers: usize, d: usize) -> Result<PrefixBlock> {
    let len = cx.g.shape(out)[0];
    let mut kv = Vec::with_capacity(layers);
    for l in 0..layers {
        let k = cx.g.slice(out, 1, 2 * l * d, d)?;
        let v = cx.g.slice(out, 1, (2 * l + 1) * d, d)?;
        kv.push((k, v));
    }
    Ok(PrefixBlock { source, len, layers: kv })
}

#[derive(Clone, Debug)]
pub struct PrefixSystem {
    layers: usize,
    d: usize,
    num_styles: usize,
    shared_len: usize,
    style_len: usize,
    pre_len: usize,
    shared_tokens: ParamId,
    style_emb: ParamId,
    style_pos: ParamId,
    fusion_w: ParamId,
    fusion_b: ParamId,
    proj_main: ProjIds,
    proj_pre: ProjIds,
    proj_content: ProjIds,
}

impl PrefixSystem {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: &RunConfig) -> Result<Self> {
        let p = &cfg.prefix;
        let main = ProjIds::lookup(store, PROJ_MAIN)?;
        let (pre, content) = if p.tie_all_projections {
            (main.clone(), main.clone())
        } else {
            (ProjIds::lookup(store, PROJ_PRE)?, ProjIds::lookup(store, PROJ_CONTENT)?)
        };
        Ok(Self {
            layers: cfg.model.num_layers,
            d: cfg.model.model_dim,
            num_styles: p.num_styles,
            shared_len: p.shared_len,
            style_len: p.style_len,
            pre_len: p.pre_len,
            shared_tokens: store.id("generator.prefix.shared_tokens")?,
            style_emb: store.id("generator.prefix.style_emb")?,
            style_pos: store.id("generator.prefix.style_pos")?,
            fusion_w: store.id("generator.prefix.fusion.w")?,
            fusion_b: store.id("generator.prefix.fusion.b")?,
            proj_main: main,
            proj_pre: pre,
            proj_content: content,
        })
    }

    pub fn shared_len(&self) -> usize {
        self.shared_len
    }

    pub fn style_len(&self) -> usize {
        self.style_len
    }

    fn check_style(&self, style: usize) -> Result<()> {
        if style >= self.num_styles {
            return Err(Error::UnknownStyle(style));
        }
        Ok(())
    }

    pub fn build_shared<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Result<PrefixBlock> {
        let x = cx.p(self.shared_tokens);
        let out = self.proj_main.apply(cx, x)?;
        to_block(cx, out, PrefixSource::Shared, self.layers, self.d)
    }

    /// The `1 x d` embedding of `style`.
    pub fn style_embedding<T: Scalar>(&self, cx: &mut Ctx<'_, T>, style: usize) -> Result<Var> {
        self.check_style(style)?;
        let table = cx.p(self.style_emb);
        Ok(cx.g.gather(table, &[style])?)
    }

    /// The style embedding is added to each of the learned style-position
    /// rows and the result projected, giving one prefix position per row.
    pub fn build_style<T: Scalar>(&self, cx: &mut Ctx<'_, T>, style: usize) -> Result<PrefixBlock> {
        let e = self.style_embedding(cx, style)?;
        let pos = cx.p(self.style_pos);
        let x = cx.g.add(pos, e)?;
        let out = self.proj_main.apply(cx, x)?;
        to_block(cx, out, PrefixSource::Style, self.layers, self.d)
    }

    /// Fuses the concatenation of every style embedding down to `d`,
    /// projects it and repeats it over the PRE_pre positions.
    pub fn build_pre<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Result<PrefixBlock> {
        let table = cx.p(self.style_emb);
        let all = cx.g.reshape(table, &[1, self.num_styles * self.d])?;
        let (w, b) = (cx.p(self.fusion_w), cx.p(self.fusion_b));
        let f = cx.g.matmul(all, w)?;
        let f = cx.g.add(f, b)?;
        let f = cx.g.tanh(f);
        let out = self.proj_pre.apply(cx, f)?;
        let width = cx.g.shape(out)[1];
        let out = cx.g.broadcast_to(out, &[self.pre_len, width])?;
        to_block(cx, out, PrefixSource::Pre, self.layers, self.d)
    }

    /// Runs the backbone over `input` behind `pre` and projects each
    /// sentence position's last-layer state; one prefix position per token.
    pub fn build_content<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        backbone: &Backbone,
        pre: &PrefixBlock,
        input: Input<'_>,
    ) -> Result<PrefixBlock> {
        let n = match input {
            Input::Hard(ids) => ids.len(),
            Input::Soft(v) => cx.g.shape(v)[0],
        };
        if n == 0 {
            return Err(Error::Empty("sentence"));
        }
        cx.stats.content_passes += 1;
        let mut kv = backbone.attach(cx, &[pre])?;
        let x = backbone.embed_at(cx, input, 0)?;
        let h = backbone.forward(cx, &mut kv, x)?;
        let out = self.proj_content.apply(cx, h)?;
        to_block(cx, out, PrefixSource::Content, self.layers, self.d)
    }
}

/// Orders the generator prefixes as `[shared | style | content]`, skipping
/// absent ones. All blocks must have the same layer count.
pub fn assemble<'p>(
    shared: Option<&'p PrefixBlock>,
    style: Option<&'p PrefixBlock>,
    content: Option<&'p PrefixBlock>,
) -> Result<Vec<&'p PrefixBlock>> {
    let out: Vec<&PrefixBlock> = [shared, style, content].into_iter().flatten().collect();
    if let Some(first) = out.first() {
        if let Some(bad) = out.iter().find(|b| b.layers.len() != first.layers.len()) {
            return Err(Error::PrefixMismatch(format!(
                "{:?} has {} layers, {:?} has {}",
                first.source,
                first.layers.len(),
                bad.source,
                bad.layers.len()
            )));
        }
    }
    Ok(out)
}

pub fn total_len(blocks: &[&PrefixBlock]) -> usize {
    blocks.iter().map(|b| b.len).sum()
}

/// Input-independent prefixes, built once per graph.
pub struct FixedPrefixes {
    pub shared: Option<PrefixBlock>,
    pub styles: Vec<Option<PrefixBlock>>,
    pub style_tokens: Vec<Option<Var>>,
    pub pre: Option<PrefixBlock>,
}

/// The frozen backbone steered by the prefix system, honouring the ablation
/// switches.
#[derive(Clone, Debug)]
pub struct Generator {
    pub backbone: Backbone,
    pub prefixes: PrefixSystem,
    pub flags: AblationFlags,
    pub num_styles: usize,
    pub soft_temperature: f64,
    pub extra_len: usize,
}

impl Generator {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(store, &cfg.model)?,
            prefixes: PrefixSystem::new(store, cfg)?,
            flags: cfg.ablation.clone(),
            num_styles: cfg.prefix.num_styles,
            soft_temperature: cfg.generation.soft_temperature,
            extra_len: cfg.generation.extra_len,
        })
    }

    pub fn fixed<T: Scalar>(&self, cx: &mut Ctx<'_, T>) -> Result<FixedPrefixes> {
        let f = &self.flags;
        let shared = if f.disable_shared_prefix { None } else { Some(self.prefixes.build_shared(cx)?) };
        let mut styles = Vec::new();
        let mut style_tokens = Vec::new();
        for s in 0..self.num_styles {
            styles.push(if f.disable_style_prefix { None } else { Some(self.prefixes.build_style(cx, s)?) });
            style_tokens.push(if f.use_style_embedding { Some(self.prefixes.style_embedding(cx, s)?) } else { None });
        }
        let pre = if f.disable_content_prefix { None } else { Some(self.prefixes.build_pre(cx)?) };
        Ok(FixedPrefixes {
            shared,
            styles,
            style_tokens,
            pre,
        })
    }

    /// Content prefix of `input`, or `None` when that prefix is disabled.
    pub fn content<T: Scalar>(&self, cx: &mut Ctx<'_, T>, fixed: &FixedPrefixes, input: Input<'_>) -> Result<Option<PrefixBlock>> {
        match &fixed.pre {
            Some(pre) => Ok(Some(self.prefixes.build_content(cx, &self.backbone, pre, input)?)),
            None => Ok(None),
        }
    }

    /// Attention memory for generating a sentence of style `style` from
    /// `context`: the assembled prefixes, then the context sentence.
    pub fn condition<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        fixed: &FixedPrefixes,
        content: Option<&PrefixBlock>,
        style: usize,
        context: Input<'_>,
    ) -> Result<KvState> {
        if style >= self.num_styles {
            return Err(Error::UnknownStyle(style));
        }
        let blocks = assemble(fixed.shared.as_ref(), fixed.styles[style].as_ref(), content)?;
        self.backbone.condition(cx, &blocks, fixed.style_tokens[style], Some(context))
    }

    /// Total prefix positions for an input of `n` tokens.
    pub fn prefix_len(&self, n: usize) -> usize {
        let f = &self.flags;
        let mut len = 0;
        if !f.disable_shared_prefix {
            len += self.prefixes.shared_len();
        }
        if !f.disable_style_prefix {
            len += self.prefixes.style_len();
        }
        if !f.disable_content_prefix {
            len += n;
        }
        len
    }

    pub fn max_len(&self, n: usize) -> usize {
        n + self.extra_len
    }

    /// Greedy (or sampled) transfer of `x` into `target`.
    pub fn transfer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[usize],
        target: usize,
        mode: crate::backbone::Decode,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut g = pst_autodiff::Graph::new();
        let mut cx = Ctx::new(&mut g, store, &[]);
        let fixed = self.fixed(&mut cx)?;
        let content = self.content(&mut cx, &fixed, Input::Hard(x))?;
        let kv = self.condition(&mut cx, &fixed, content.as_ref(), target, Input::Hard(x))?;
        self.backbone.generate(&mut cx, &kv, mode, max_len)
    }
}
