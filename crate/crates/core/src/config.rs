//! Run configuration: every hyperparameter, loadable from `key = value` files.
//!
//! Defaults follow the published setup where one exists (prefix lengths
//! 10/20, projection hidden width 128, Adam at 1e-4, batch 8, loss weights
//! 0.25/0.5/1.0, ten discriminator steps per five generator steps) and the
//! desk-scale model otherwise.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Zero means "take it from the vocabulary".
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 128,
            ff_dim: 512,
            vocab_size: 0,
            max_positions: 128,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixConfig {
    pub shared_len: usize,
    pub style_len: usize,
    pub pre_len: usize,
    pub dis_len: usize,
    pub projection_hidden: usize,
    /// Use one projection network for the shared, style, PRE_pre and content paths.
    pub tie_all_projections: bool,
    pub num_styles: usize,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            shared_len: 10,
            style_len: 20,
            pre_len: 20,
            dis_len: 10,
            projection_hidden: 128,
            tie_all_projections: true,
            num_styles: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub self_recon: f64,
    pub cycle: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            self_recon: 0.25,
            cycle: 0.5,
            style: 1.0,
        }
    }
}

impl LossWeights {
    pub fn combine(&self, self_recon: f64, cycle: f64, style: f64) -> f64 {
        self.self_recon * self_recon + self.cycle * cycle + self.style * style
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub dis_steps: usize,
    pub gen_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Dev sentences per style used for checkpoint selection.
    pub select_dev_per_style: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            dis_steps: 10,
            gen_steps: 5,
            total_steps: 10_000,
            batch_size: 8,
            checkpoint_every: 500,
            select_dev_per_style: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationFlags {
    pub disable_shared_prefix: bool,
    pub disable_style_prefix: bool,
    pub use_style_embedding: bool,
    pub disable_content_prefix: bool,
    pub full_finetune: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_style_embedding && !self.disable_style_prefix {
            return Err(Error::Config(
                "ablation.use_style_embedding requires ablation.disable_style_prefix".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub soft_temperature: f64,
    /// Output budget beyond the input length.
    pub extra_len: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            soft_temperature: 1.0,
            extra_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of pretraining sequences in the conditioned `X <sep> X` layout.
    pub copy_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 1e-3,
            batch_size: 16,
            copy_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub max_sentence_len: usize,
    pub model: ModelConfig,
    pub prefix: PrefixConfig,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub optim: OptimConfig,
    pub ablation: AblationFlags,
    pub generation: GenerationConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            max_sentence_len: 32,
            model: ModelConfig::default(),
            prefix: PrefixConfig::default(),
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            optim: OptimConfig::default(),
            ablation: AblationFlags::default(),
            generation: GenerationConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse(raw: &str) -> Option<Self>;
}

impl ConfigValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(raw: &str) -> Option<Self> {
        raw.replace('_', "").parse().ok()
    }
}

impl ConfigValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(raw: &str) -> Option<Self> {
        raw.replace('_', "").parse().ok()
    }
}

impl ConfigValue for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse(raw: &str) -> Option<Self> {
        raw.parse().ok().filter(|v: &f64| v.is_finite())
    }
}

impl ConfigValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse(raw: &str) -> Option<Self> {
        match raw {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        }
    }
}

fn parse_as<V: ConfigValue>(key: &str, raw: &str) -> Result<V> {
    V::parse(raw).ok_or_else(|| Error::Config(format!("bad value `{raw}` for `{key}`")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl RunConfig {
            /// `(key, value)` pairs in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$($field).+)),)*]
            }

            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_as(key, raw)?,)*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "seed" => seed;
    "max_sentence_len" => max_sentence_len;
    "model.num_layers" => model.num_layers;
    "model.num_heads" => model.num_heads;
    "model.model_dim" => model.model_dim;
    "model.ff_dim" => model.ff_dim;
    "model.vocab_size" => model.vocab_size;
    "model.max_positions" => model.max_positions;
    "prefix.shared_len" => prefix.shared_len;
    "prefix.style_len" => prefix.style_len;
    "prefix.pre_len" => prefix.pre_len;
    "prefix.dis_len" => prefix.dis_len;
    "prefix.projection_hidden" => prefix.projection_hidden;
    "prefix.tie_all_projections" => prefix.tie_all_projections;
    "prefix.num_styles" => prefix.num_styles;
    "loss.lambda_self" => loss.self_recon;
    "loss.lambda_cycle" => loss.cycle;
    "loss.lambda_style" => loss.style;
    "schedule.dis_steps" => schedule.dis_steps;
    "schedule.gen_steps" => schedule.gen_steps;
    "schedule.total_steps" => schedule.total_steps;
    "schedule.batch_size" => schedule.batch_size;
    "schedule.checkpoint_every" => schedule.checkpoint_every;
    "schedule.select_dev_per_style" => schedule.select_dev_per_style;
    "optim.lr" => optim.lr;
    "optim.beta1" => optim.beta1;
    "optim.beta2" => optim.beta2;
    "optim.eps" => optim.eps;
    "optim.clip_norm" => optim.clip_norm;
    "ablation.disable_shared_prefix" => ablation.disable_shared_prefix;
    "ablation.disable_style_prefix" => ablation.disable_style_prefix;
    "ablation.use_style_embedding" => ablation.use_style_embedding;
    "ablation.disable_content_prefix" => ablation.disable_content_prefix;
    "ablation.full_finetune" => ablation.full_finetune;
    "generation.soft_temperature" => generation.soft_temperature;
    "generation.extra_len" => generation.extra_len;
    "pretrain.steps" => pretrain.steps;
    "pretrain.lr" => pretrain.lr;
    "pretrain.batch_size" => pretrain.batch_size;
    "pretrain.copy_fraction" => pretrain.copy_fraction;
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ablation.validate()?;
        let p = &self.prefix;
        if p.shared_len == 0 || p.style_len == 0 || p.pre_len == 0 || p.dis_len == 0 {
            return Err(Error::Config("prefix lengths must be positive".into()));
        }
        if p.projection_hidden == 0 {
            return Err(Error::Config("prefix.projection_hidden must be positive".into()));
        }
        if p.num_styles < 2 {
            return Err(Error::Config("prefix.num_styles must be at least 2".into()));
        }
        let w = &self.loss;
        if w.self_recon < 0.0 || w.cycle < 0.0 || w.style < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let s = &self.schedule;
        if s.dis_steps == 0 || s.gen_steps == 0 || s.batch_size == 0 {
            return Err(Error::Config(
                "schedule step counts and batch size must be at least 1".into(),
            ));
        }
        if self.generation.soft_temperature <= 0.0 {
            return Err(Error::Config("generation.soft_temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.prefix.shared_len, c.prefix.style_len), (10, 20));
        assert_eq!(c.prefix.projection_hidden, 128);
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.schedule.batch_size, 8);
        assert_eq!((c.schedule.dis_steps, c.schedule.gen_steps), (10, 5));
        assert_eq!((c.loss.self_recon, c.loss.cycle, c.loss.style), (0.25, 0.5, 1.0));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("optim.lr", "3e-4").unwrap();
        c.set("ablation.full_finetune", "true").unwrap();
        let back = RunConfig::parse(&c.canonical_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let c = RunConfig::parse("# header\n\nseed = 7  # trailing\nmodel.num_layers=2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.num_layers, 2);
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed").is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.loss.cycle = 0.6;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.model.vocab_size = 50;
        c.validate().unwrap();
        c.model.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.vocab_size = 50;
        c.ablation.use_style_embedding = true;
        assert!(c.validate().is_err());
        c.ablation.disable_style_prefix = true;
        c.validate().unwrap();
    }
}
