//! Named parameter tensors partitioned into backbone, generator and
//! discriminator groups.
//!
//! [`param_specs`] is the single source of truth for every tensor the model
//! owns: allocation, checkpoint layout and the parameter-count report all
//! read from it.

use std::collections::HashMap;

use pst_autodiff::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Generator,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::Generator, Group::Discriminator];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const INIT_STD: f64 = 0.02;

fn spec(out: &mut Vec<ParamSpec>, group: Group, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        group,
        shape: shape.to_vec(),
        init,
    });
}

fn projection_specs(out: &mut Vec<ParamSpec>, group: Group, base: &str, d: usize, hidden: usize, width: usize) {
    spec(out, group, format!("{base}.w1"), &[d, hidden], Init::Normal(INIT_STD));
    spec(out, group, format!("{base}.b1"), &[hidden], Init::Zeros);
    spec(out, group, format!("{base}.w2"), &[hidden, width], Init::Normal(INIT_STD));
    spec(out, group, format!("{base}.b2"), &[width], Init::Zeros);
}

pub const PROJ_MAIN: &str = "generator.prefix.proj_main";
pub const PROJ_PRE: &str = "generator.prefix.proj_pre";
pub const PROJ_CONTENT: &str = "generator.prefix.proj_content";
pub const PROJ_DIS: &str = "discriminator.proj";

/// Every parameter of the full model for `cfg` (whose vocabulary size must
/// already be resolved).
pub fn param_specs(cfg: &RunConfig) -> Vec<ParamSpec> {
    let m = &cfg.model;
    let p = &cfg.prefix;
    let d = m.model_dim;
    let mut out = Vec::new();

    let bb = Group::Backbone;
    spec(&mut out, bb, "backbone.wte".into(), &[m.vocab_size, d], Init::Normal(INIT_STD));
    spec(&mut out, bb, "backbone.wpe".into(), &[m.max_positions, d], Init::Normal(INIT_STD / 2.0));
    let resid_std = INIT_STD / (2.0 * m.num_layers as f64).sqrt();
    for l in 0..m.num_layers {
        let h = format!("backbone.h{l}");
        spec(&mut out, bb, format!("{h}.ln1.g"), &[d], Init::Ones);
        spec(&mut out, bb, format!("{h}.ln1.b"), &[d], Init::Zeros);
        spec(&mut out, bb, format!("{h}.attn.w_qkv"), &[d, 3 * d], Init::Normal(INIT_STD));
        spec(&mut out, bb, format!("{h}.attn.b_qkv"), &[3 * d], Init::Zeros);
        spec(&mut out, bb, format!("{h}.attn.w_o"), &[d, d], Init::Normal(resid_std));
        spec(&mut out, bb, format!("{h}.attn.b_o"), &[d], Init::Zeros);
        spec(&mut out, bb, format!("{h}.ln2.g"), &[d], Init::Ones);
        spec(&mut out, bb, format!("{h}.ln2.b"), &[d], Init::Zeros);
        spec(&mut out, bb, format!("{h}.mlp.w_fc"), &[d, m.ff_dim], Init::Normal(INIT_STD));
        spec(&mut out, bb, format!("{h}.mlp.b_fc"), &[m.ff_dim], Init::Zeros);
        spec(&mut out, bb, format!("{h}.mlp.w_proj"), &[m.ff_dim, d], Init::Normal(resid_std));
        spec(&mut out, bb, format!("{h}.mlp.b_proj"), &[d], Init::Zeros);
    }
    spec(&mut out, bb, "backbone.ln_f.g".into(), &[d], Init::Ones);
    spec(&mut out, bb, "backbone.ln_f.b".into(), &[d], Init::Zeros);

    let kv_width = 2 * m.num_layers * d;
    let gen = Group::Generator;
    spec(&mut out, gen, "generator.prefix.shared_tokens".into(), &[p.shared_len, d], Init::Normal(1.0));
    spec(&mut out, gen, "generator.prefix.style_emb".into(), &[p.num_styles, d], Init::Normal(1.0));
    spec(&mut out, gen, "generator.prefix.style_pos".into(), &[p.style_len, d], Init::Normal(1.0));
    spec(&mut out, gen, "generator.prefix.fusion.w".into(), &[p.num_styles * d, d], Init::Normal(INIT_STD));
    spec(&mut out, gen, "generator.prefix.fusion.b".into(), &[d], Init::Zeros);
    projection_specs(&mut out, gen, PROJ_MAIN, d, p.projection_hidden, kv_width);
    if !p.tie_all_projections {
        projection_specs(&mut out, gen, PROJ_PRE, d, p.projection_hidden, kv_width);
        projection_specs(&mut out, gen, PROJ_CONTENT, d, p.projection_hidden, kv_width);
    }

    let dis = Group::Discriminator;
    spec(&mut out, dis, "discriminator.tokens".into(), &[p.dis_len, d], Init::Normal(1.0));
    projection_specs(&mut out, dis, PROJ_DIS, d, p.projection_hidden, kv_width);
    spec(&mut out, dis, "discriminator.head.w".into(), &[2 * d, p.num_styles + 1], Init::Normal(INIT_STD));
    spec(&mut out, dis, "discriminator.head.b".into(), &[p.num_styles + 1], Init::Zeros);
    out
}

/// Parameter totals per group, from the specs alone (nothing is allocated).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub generator: usize,
    pub discriminator: usize,
}

impl ParamCounts {
    pub fn of(cfg: &RunConfig) -> Self {
        let mut c = Self::default();
        for s in param_specs(cfg) {
            match s.group {
                Group::Backbone => c.backbone += s.numel(),
                Group::Generator => c.generator += s.numel(),
                Group::Discriminator => c.discriminator += s.numel(),
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.backbone + self.generator + self.discriminator
    }

    /// Generator-trainable parameters over backbone plus generator.
    pub fn generator_ratio(&self) -> f64 {
        self.generator as f64 / (self.backbone + self.generator) as f64
    }

    /// Everything trained adversarially over every parameter.
    pub fn trainable_ratio(&self) -> f64 {
        (self.generator + self.discriminator) as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    groups: Vec<Group>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            groups: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates every tensor of `specs`, drawing normal inits from one
    /// seeded stream in spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for s in specs {
            let n = s.numel();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            let t = Tensor::new(&s.shape, data).expect("spec shapes are positive");
            store.insert(&s.name, s.group, t);
        }
        store
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor<T>) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            self.groups[i] = group;
            self.values[i] = value;
            return ParamId(i);
        }
        self.names.push(name.to_string());
        self.groups.push(group);
        self.values.push(value);
        self.index.insert(name.to_string(), self.names.len() - 1);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.ids_in(group).iter().map(|&id| self.get(id).numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            groups: self.groups.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// True when every tensor of `group` is bitwise equal in both stores.
    pub fn group_bit_eq(&self, other: &ParamStore<T>, group: Group) -> bool {
        self.ids_in(group).into_iter().all(|id| {
            other
                .by_name(self.name(id))
                .is_some_and(|t| t.bit_eq(self.get(id)))
        })
    }
}
