//! Generator and discriminator objectives.
//!
//! For an input `X` of style `s` and a target style `s'`:
//!
//! * `L_self  = -log P(X | X, s)`, teacher-forced through the prefixes for
//!   `(X, s)`;
//! * `L_style = -log D(s' | Y)` where `Y` is soft-decoded from `(X, s')`;
//! * `L_cycle = -log P(X | Y, s)`, with `Y` fed back as a soft sentence;
//! * `L_dis   = -log D(c | Z)` for a real sentence with class `c = style`
//!   or a generated one with `c = fake`.
//!
//! Sentence log-likelihoods cover the tokens of `X` followed by the end
//! marker.

use pst_autodiff::{Scalar, Tensor, Var};

use crate::backbone::{Input, PrefixBlock};
use crate::config::LossWeights;
use crate::corpus::{EOS, SEP};
use crate::ctx::Ctx;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::prefix::{FixedPrefixes, Generator};

/// Target sequence scored by the reconstruction losses: `X` then the end marker.
pub fn recon_target(x: &[usize]) -> Vec<usize> {
    let mut t = x.to_vec();
    t.push(EOS);
    t
}

/// Graph nodes of the three generator losses for one sentence.
#[derive(Clone, Copy, Debug)]
pub struct GenTerms {
    pub l_self: Var,
    pub l_style: Var,
    pub l_cycle: Var,
    /// The soft transfer `Y`, `m x V`.
    pub y: Var,
}

/// Builds every generator loss for `x` (style `s`) transferred to `target`.
/// The content prefix of `x` is computed once and shared by both directions.
#[allow(clippy::too_many_arguments)]
pub fn generator_terms<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    gen: &Generator,
    dis: &Discriminator,
    fixed: &FixedPrefixes,
    dis_prefix: &PrefixBlock,
    x: &[usize],
    s: usize,
    target: usize,
) -> Result<GenTerms> {
    if x.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let goal = recon_target(x);
    let content_x = gen.content(cx, fixed, Input::Hard(x))?;

    let kv_self = gen.condition(cx, fixed, content_x.as_ref(), s, Input::Hard(x))?;
    let l_self = gen.backbone.nll(cx, &kv_self, SEP, &goal)?;

    let kv_tr = gen.condition(cx, fixed, content_x.as_ref(), target, Input::Hard(x))?;
    let y = gen
        .backbone
        .generate_soft(cx, &kv_tr, gen.soft_temperature, gen.max_len(x.len()))?
        .ok_or(Error::Empty("generated sentence"))?;

    let l_style = dis.nll(cx, dis_prefix, Input::Soft(y), target)?;

    let content_y = gen.content(cx, fixed, Input::Soft(y))?;
    let kv_cyc = gen.condition(cx, fixed, content_y.as_ref(), s, Input::Soft(y))?;
    let l_cycle = gen.backbone.nll(cx, &kv_cyc, SEP, &goal)?;

    Ok(GenTerms {
        l_self,
        l_style,
        l_cycle,
        y,
    })
}

/// `lambda_self * L_self + lambda_cycle * L_cycle + lambda_style * L_style`.
pub fn weighted<T: Scalar>(cx: &mut Ctx<'_, T>, w: &LossWeights, t: &GenTerms) -> Result<Var> {
    let a = cx.g.scale(t.l_self, w.self_recon);
    let b = cx.g.scale(t.l_cycle, w.cycle);
    let c = cx.g.scale(t.l_style, w.style);
    let ab = cx.g.add(a, b)?;
    Ok(cx.g.add(ab, c)?)
}

/// Batch-mean generator objective plus the batch means of each component.
pub struct GenObjective {
    pub loss: Var,
    pub l_self: f64,
    pub l_cycle: f64,
    pub l_style: f64,
    pub ys: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    gen: &Generator,
    dis: &Discriminator,
    weights: &LossWeights,
    batch: &[&[usize]],
    styles: &[usize],
    targets: &[usize],
) -> Result<GenObjective> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let fixed = gen.fixed(cx)?;
    let dis_prefix = dis.prefix(cx)?;
    let mut total: Option<Var> = None;
    let (mut ls, mut lc, mut lt) = (0.0, 0.0, 0.0);
    let mut ys = Vec::with_capacity(batch.len());
    for ((x, &s), &t) in batch.iter().zip(styles).zip(targets) {
        let terms = generator_terms(cx, gen, dis, &fixed, &dis_prefix, x, s, t)?;
        ls += cx.g.value(terms.l_self).item().to_f64();
        lc += cx.g.value(terms.l_cycle).item().to_f64();
        lt += cx.g.value(terms.l_style).item().to_f64();
        ys.push(terms.y);
        let l = weighted(cx, weights, &terms)?;
        total = Some(match total {
            Some(acc) => cx.g.add(acc, l)?,
            None => l,
        });
    }
    let n = batch.len() as f64;
    let loss = cx.g.scale(total.expect("non-empty batch"), 1.0 / n);
    Ok(GenObjective {
        loss,
        l_self: ls / n,
        l_cycle: lc / n,
        l_style: lt / n,
        ys,
    })
}

/// One discriminator example: a real sentence or a detached soft transfer.
#[derive(Clone, Debug)]
pub enum DisExample<'a, T> {
    Real(&'a [usize]),
    Fake(&'a Tensor<T>),
}

/// Mean `-log D(class | example)`; also returns how many examples the
/// discriminator classified correctly.
pub fn dis_objective<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    dis: &Discriminator,
    examples: &[(DisExample<'_, T>, usize)],
) -> Result<(Var, usize)> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let prefix = dis.prefix(cx)?;
    let mut total: Option<Var> = None;
    let mut correct = 0;
    for (ex, class) in examples {
        let input = match ex {
            DisExample::Real(ids) => Input::Hard(ids),
            DisExample::Fake(t) => Input::Soft(cx.constant((*t).clone())),
        };
        let logits = dis.logits(cx, &prefix, input)?;
        let row: Vec<f64> = cx.g.value(logits).data().iter().map(|v| v.to_f64()).collect();
        if crate::backbone::argmax(&row, false) == *class {
            correct += 1;
        }
        let l = cx.g.cross_entropy(logits, &[*class], pst_autodiff::Reduction::Sum)?;
        total = Some(match total {
            Some(acc) => cx.g.add(acc, l)?,
            None => l,
        });
    }
    let loss = cx.g.scale(total.expect("non-empty"), 1.0 / examples.len() as f64);
    Ok((loss, correct))
}
