//! Miniature GPT-2 style decoder: learned token and position embeddings,
//! pre-norm blocks with multi-head causal attention and a GELU MLP, a final
//! layer norm and logits tied to the token embeddings.
//!
//! Every layer's attention can be extended with externally supplied
//! key/value rows ([`PrefixBlock`]s). Prefix rows are visible to every
//! sentence position and carry no positional embedding.

use pst_autodiff::{Reduction, Scalar, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::{EOS, SEP};
use crate::ctx::Ctx;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixSource {
    Shared,
    Style,
    Pre,
    Content,
    Discriminator,
}

/// Per-layer key and value rows, each `len x d`.
#[derive(Clone, Debug)]
pub struct PrefixBlock {
    pub source: PrefixSource,
    pub len: usize,
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_qkv: ParamId,
    b_qkv: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    wte: ParamId,
    wpe: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Attention memory: every key/value row visible to the next positions.
#[derive(Clone, Debug)]
pub struct KvState {
    keys: Vec<Option<Var>>,
    values: Vec<Option<Var>>,
    /// Prefix rows plus sentence positions seen so far.
    pub len: usize,
    pub prefix_len: usize,
}

impl KvState {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            keys: vec![None; num_layers],
            values: vec![None; num_layers],
            len: 0,
            prefix_len: 0,
        }
    }

    pub fn layer(&self, l: usize) -> (Option<Var>, Option<Var>) {
        (self.keys[l], self.values[l])
    }
}

/// A sentence given as ids or as rows of a probability distribution over
/// the vocabulary.
#[derive(Clone, Copy, Debug)]
pub enum Input<'s> {
    Hard(&'s [usize]),
    Soft(Var),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

fn cat<T: Scalar>(cx: &mut Ctx<'_, T>, a: Option<Var>, b: Var) -> Result<Var> {
    Ok(match a {
        Some(a) => cx.g.concat(&[a, b], 0)?,
        None => b,
    })
}

impl Backbone {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let id = |s: &str| store.id(&format!("backbone.h{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: id("ln1.g")?,
                    ln1_b: id("ln1.b")?,
                    w_qkv: id("attn.w_qkv")?,
                    b_qkv: id("attn.b_qkv")?,
                    w_o: id("attn.w_o")?,
                    b_o: id("attn.b_o")?,
                    ln2_g: id("ln2.g")?,
                    ln2_b: id("ln2.b")?,
                    w_fc: id("mlp.w_fc")?,
                    b_fc: id("mlp.b_fc")?,
                    w_proj: id("mlp.w_proj")?,
                    b_proj: id("mlp.b_proj")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            wte: store.id("backbone.wte")?,
            wpe: store.id("backbone.wpe")?,
            layers,
            lnf_g: store.id("backbone.ln_f.g")?,
            lnf_b: store.id("backbone.ln_f.b")?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    /// Attention memory holding the given prefixes, in order.
    pub fn attach<T: Scalar>(&self, cx: &mut Ctx<'_, T>, prefixes: &[&PrefixBlock]) -> Result<KvState> {
        let mut kv = KvState::empty(self.cfg.num_layers);
        for p in prefixes {
            if p.layers.len() != self.cfg.num_layers {
                return Err(Error::PrefixMismatch(format!(
                    "{:?} prefix has {} layers, model has {}",
                    p.source,
                    p.layers.len(),
                    self.cfg.num_layers
                )));
            }
            for (l, &(k, v)) in p.layers.iter().enumerate() {
                kv.keys[l] = Some(cat(cx, kv.keys[l], k)?);
                kv.values[l] = Some(cat(cx, kv.values[l], v)?);
            }
            kv.len += p.len;
        }
        kv.prefix_len = kv.len;
        if kv.len > self.cfg.max_positions {
            return Err(Error::TooLong {
                prefix: kv.len,
                tokens: 0,
                max: self.cfg.max_positions,
            });
        }
        Ok(kv)
    }

    /// Token embeddings (no positions) for `input`, `n x d`.
    pub fn embed<T: Scalar>(&self, cx: &mut Ctx<'_, T>, input: Input<'_>) -> Result<Var> {
        let wte = cx.p(self.wte);
        match input {
            Input::Hard(ids) => {
                if let Some(&id) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
                    return Err(Error::UnknownToken {
                        id: id as u32,
                        vocab: self.cfg.vocab_size,
                    });
                }
                Ok(cx.g.gather(wte, ids)?)
            }
            Input::Soft(probs) => Ok(cx.g.matmul(probs, wte)?),
        }
    }

    /// Adds position embeddings `start..start + n` to the rows of `x`.
    pub fn add_positions<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, start: usize) -> Result<Var> {
        let n = cx.g.shape(x)[0];
        if start + n > self.cfg.max_positions {
            return Err(Error::TooLong {
                prefix: 0,
                tokens: start + n,
                max: self.cfg.max_positions,
            });
        }
        let wpe = cx.p(self.wpe);
        let ids: Vec<usize> = (start..start + n).collect();
        let pos = cx.g.gather(wpe, &ids)?;
        Ok(cx.g.add(x, pos)?)
    }

    /// Embeds `input` at positions `start..` in one step.
    pub fn embed_at<T: Scalar>(&self, cx: &mut Ctx<'_, T>, input: Input<'_>, start: usize) -> Result<Var> {
        let e = self.embed(cx, input)?;
        self.add_positions(cx, e, start)
    }

    /// Runs the blocks over the rows `x` (`n x d`, already embedded), which
    /// attend to everything in `kv` and causally to each other. Their keys and
    /// values are appended to `kv`. Returns final-layer-normed states `n x d`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, kv: &mut KvState, x: Var) -> Result<Var> {
        let x = self.forward_residual(cx, kv, x)?;
        let (g, b) = (cx.p(self.lnf_g), cx.p(self.lnf_b));
        Ok(cx.g.layer_norm(x, g, b)?)
    }

    /// Like [`Backbone::forward`] but returns the residual stream before the
    /// final layer norm.
    pub fn forward_residual<T: Scalar>(&self, cx: &mut Ctx<'_, T>, kv: &mut KvState, x: Var) -> Result<Var> {
        let n = cx.g.shape(x)[0];
        if kv.len + n > self.cfg.max_positions {
            return Err(Error::TooLong {
                prefix: kv.prefix_len,
                tokens: kv.len - kv.prefix_len + n,
                max: self.cfg.max_positions,
            });
        }
        cx.stats.backbone_forwards += 1;
        let d = self.cfg.model_dim;
        let heads = self.cfg.num_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let past = kv.len;
        let mut x = x;
        for (l, ids) in self.layers.iter().enumerate() {
            let (g1, b1) = (cx.p(ids.ln1_g), cx.p(ids.ln1_b));
            let h = cx.g.layer_norm(x, g1, b1)?;
            let (w, b) = (cx.p(ids.w_qkv), cx.p(ids.b_qkv));
            let qkv = cx.g.matmul(h, w)?;
            let qkv = cx.g.add(qkv, b)?;
            let q = cx.g.slice(qkv, 1, 0, d)?;
            let k = cx.g.slice(qkv, 1, d, d)?;
            let v = cx.g.slice(qkv, 1, 2 * d, d)?;
            let k_all = cat(cx, kv.keys[l], k)?;
            let v_all = cat(cx, kv.values[l], v)?;
            kv.keys[l] = Some(k_all);
            kv.values[l] = Some(v_all);

            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = cx.g.slice(q, 1, hh * hd, hd)?;
                let kh = cx.g.slice(k_all, 1, hh * hd, hd)?;
                let vh = cx.g.slice(v_all, 1, hh * hd, hd)?;
                let s = cx.g.matmul_nt(qh, kh)?;
                let s = cx.g.scale(s, scale);
                let s = cx.g.causal_mask(s, past)?;
                let a = cx.g.softmax(s);
                outs.push(cx.g.matmul(a, vh)?);
            }
            let att = if heads == 1 { outs[0] } else { cx.g.concat(&outs, 1)? };
            let (w, b) = (cx.p(ids.w_o), cx.p(ids.b_o));
            let att = cx.g.matmul(att, w)?;
            let att = cx.g.add(att, b)?;
            x = cx.g.add(x, att)?;

            let (g2, b2) = (cx.p(ids.ln2_g), cx.p(ids.ln2_b));
            let h = cx.g.layer_norm(x, g2, b2)?;
            let (w, b) = (cx.p(ids.w_fc), cx.p(ids.b_fc));
            let m = cx.g.matmul(h, w)?;
            let m = cx.g.add(m, b)?;
            let m = cx.g.gelu(m);
            let (w, b) = (cx.p(ids.w_proj), cx.p(ids.b_proj));
            let m = cx.g.matmul(m, w)?;
            let m = cx.g.add(m, b)?;
            x = cx.g.add(x, m)?;
        }
        kv.len += n;
        Ok(x)
    }

    /// Next-token logits for final states `h`, `n x V`.
    pub fn logits<T: Scalar>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let wte = cx.p(self.wte);
        Ok(cx.g.matmul_nt(h, wte)?)
    }

    /// Attaches `prefixes`, then reads `extra` rows (pseudo-token embeddings
    /// without positions) and the `context` sentence at positions `0..`.
    pub fn condition<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        prefixes: &[&PrefixBlock],
        extra: Option<Var>,
        context: Option<Input<'_>>,
    ) -> Result<KvState> {
        let mut kv = self.attach(cx, prefixes)?;
        let ctx_rows = match context {
            Some(c) => Some(self.embed_at(cx, c, 0)?),
            None => None,
        };
        let rows = match (extra, ctx_rows) {
            (Some(e), Some(c)) => Some(cx.g.concat(&[e, c], 0)?),
            (e, c) => e.or(c),
        };
        if let Some(rows) = rows {
            self.forward(cx, &mut kv, rows)?;
        }
        Ok(kv)
    }

    /// Teacher-forced `-sum_t log p(target_t | kv, start, target_<t)` with the
    /// inputs `[start, target[..m-1]]` at positions `0..m`.
    pub fn nll<T: Scalar>(&self, cx: &mut Ctx<'_, T>, kv: &KvState, start: usize, target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Empty("target"));
        }
        let mut inputs = Vec::with_capacity(target.len());
        inputs.push(start);
        inputs.extend_from_slice(&target[..target.len() - 1]);
        let x = self.embed_at(cx, Input::Hard(&inputs), 0)?;
        let mut kv = kv.clone();
        let h = self.forward(cx, &mut kv, x)?;
        let logits = self.logits(cx, h)?;
        if let Some(&id) = target.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken {
                id: id as u32,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(cx.g.cross_entropy(logits, target, Reduction::Sum)?)
    }

    /// Hard autoregressive decoding after a separator. The end marker is not
    /// allowed as the first token and terminates decoding afterwards; it is
    /// not included in the output.
    pub fn generate<T: Scalar>(&self, cx: &mut Ctx<'_, T>, kv: &KvState, mode: Decode, max_len: usize) -> Result<Vec<usize>> {
        let mut kv = kv.clone();
        let mut rng = match mode {
            Decode::Sample { seed, .. } => Some(<rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)),
            Decode::Greedy => None,
        };
        let mut out = Vec::new();
        let mut prev = SEP;
        for t in 0..max_len {
            let x = self.embed_at(cx, Input::Hard(&[prev]), t)?;
            let h = self.forward(cx, &mut kv, x)?;
            let logits = self.logits(cx, h)?;
            let row: Vec<f64> = cx.g.value(logits).data().iter().map(|v| v.to_f64()).collect();
            let next = match (mode, rng.as_mut()) {
                (Decode::Sample { temperature, .. }, Some(rng)) => sample_index(&row, temperature, t == 0, rng),
                _ => argmax(&row, t == 0),
            };
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Differentiable decoding: each step's softmax(logits / temperature)
    /// is fed back as the next input. Stops once the most likely token is the
    /// end marker (never at the first step) or after `max_len` steps. Returns
    /// the emitted distributions as rows of an `m x V` matrix, or `None` when
    /// `max_len` is zero.
    pub fn generate_soft<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        kv: &KvState,
        temperature: f64,
        max_len: usize,
    ) -> Result<Option<Var>> {
        let mut kv = kv.clone();
        let mut rows = Vec::new();
        let mut x = self.embed_at(cx, Input::Hard(&[SEP]), 0)?;
        for t in 0..max_len {
            let h = self.forward(cx, &mut kv, x)?;
            let logits = self.logits(cx, h)?;
            let scaled = if temperature == 1.0 { logits } else { cx.g.scale(logits, 1.0 / temperature) };
            let probs = cx.g.softmax(scaled);
            let row: Vec<f64> = cx.g.value(probs).data().iter().map(|v| v.to_f64()).collect();
            if t > 0 && argmax(&row, false) == EOS {
                break;
            }
            rows.push(probs);
            if t + 1 < max_len {
                x = self.embed_at(cx, Input::Soft(probs), t + 1)?;
            }
        }
        Ok(match rows.len() {
            0 => None,
            1 => Some(rows[0]),
            _ => Some(cx.g.concat(&rows, 0)?),
        })
    }
}

pub(crate) fn argmax(row: &[f64], ban_eos: bool) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if ban_eos && i == EOS {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index(logits: &[f64], temperature: f64, ban_eos: bool, rng: &mut impl Rng) -> usize {
    let allowed = |i: usize| !(ban_eos && i == EOS);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { ((v - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i;
            }
            u -= w;
        }
    }
    argmax(logits, ban_eos)
}

/// Probability rows of a soft sentence as a one-hot matrix for `ids`.
pub fn one_hot<T: Scalar>(ids: &[usize], vocab: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; ids.len() * vocab];
    for (r, &i) in ids.iter().enumerate() {
        data[r * vocab + i] = T::ONE;
    }
    Tensor::new(&[ids.len(), vocab], data).expect("non-empty")
}
