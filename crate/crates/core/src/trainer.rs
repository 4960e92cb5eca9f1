//! Adversarial training of the prefixes and the discriminator.
//!
//! Training runs in cycles of `dis_steps` discriminator updates followed by
//! `gen_steps` generator updates. Generator batches hold sentences of a
//! single style and alternate between styles; every sentence is sent to the
//! other style. Discriminator batches mix real training sentences (labelled
//! with their style) and earlier soft transfers (labelled fake) taken from a
//! FIFO pool filled by the generator steps.

use std::collections::VecDeque;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use pst_autodiff::{Graph, Tensor};

use crate::backbone::{Decode, Input};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{Batch, BatchIterator, Dataset, Example, IterState, Vocab};
use crate::ctx::Ctx;
use crate::discriminator::Discriminator;
use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate, EvalSuite, Transfer};
use crate::losses::{dis_objective, generator_objective, DisExample};
use crate::model::{export_params, restore_params, store_with_backbone};
use crate::optim::Adam;
use crate::params::{Group, ParamCounts, ParamStore};
use crate::prefix::Generator;

pub const LOG_FILE: &str = "train.log";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Dis {
        step: u64,
        loss: f64,
        correct: usize,
        total: usize,
        grad_norm: Option<f64>,
    },
    Gen {
        step: u64,
        source: usize,
        target: usize,
        l_self: f64,
        l_cycle: f64,
        l_style: f64,
        l_gen: f64,
        grad_norm: Option<f64>,
    },
    Select {
        step: u64,
        acc: f64,
        self_bleu: f64,
        score: f64,
        best: bool,
    },
}

impl Record {
    pub fn step(&self) -> u64 {
        match self {
            Record::Dis { step, .. } | Record::Gen { step, .. } | Record::Select { step, .. } => *step,
        }
    }
}

fn norm_field(f: &mut fmt::Formatter<'_>, g: &Option<f64>) -> fmt::Result {
    match g {
        Some(n) => write!(f, "\tgrad_norm={n:?}"),
        None => write!(f, "\tstatus=skipped_nonfinite"),
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Record::Dis {
                step,
                loss,
                correct,
                total,
                grad_norm,
            } => {
                write!(f, "step={step}\tphase=D\tl_dis={loss:?}\tcorrect={correct}/{total}")?;
                norm_field(f, grad_norm)
            }
            Record::Gen {
                step,
                source,
                target,
                l_self,
                l_cycle,
                l_style,
                l_gen,
                grad_norm,
            } => {
                write!(
                    f,
                    "step={step}\tphase=G\tsrc={source}\ttgt={target}\tl_self={l_self:?}\tl_cycle={l_cycle:?}\tl_style={l_style:?}\tl_gen={l_gen:?}"
                )?;
                norm_field(f, grad_norm)
            }
            Record::Select {
                step,
                acc,
                self_bleu,
                score,
                best,
            } => write!(
                f,
                "step={step}\tphase=select\tdev_acc={acc:?}\tdev_self_bleu={self_bleu:?}\tscore={score:?}\tbest={best}"
            ),
        }
    }
}

/// Parses the `key=value` fields of a log line.
pub fn parse_fields(line: &str) -> Vec<(&str, &str)> {
    line.split('\t').filter_map(|kv| kv.split_once('=')).collect()
}

/// Which phase step `step` (1-based) belongs to.
pub fn phase_of(cfg: &RunConfig, step: u64) -> char {
    let cycle = (cfg.schedule.dis_steps + cfg.schedule.gen_steps) as u64;
    if (step - 1) % cycle < cfg.schedule.dis_steps as u64 {
        'D'
    } else {
        'G'
    }
}

fn generator_groups(cfg: &RunConfig) -> Vec<Group> {
    if cfg.ablation.full_finetune {
        vec![Group::Generator, Group::Backbone]
    } else {
        vec![Group::Generator]
    }
}

/// Header comment lines describing a run.
pub fn log_header(cfg: &RunConfig) -> String {
    let c = ParamCounts::of(cfg);
    let f = &cfg.ablation;
    let mut parts = Vec::new();
    if !f.disable_shared_prefix {
        parts.push(cfg.prefix.shared_len.to_string());
    }
    if !f.disable_style_prefix {
        parts.push(cfg.prefix.style_len.to_string());
    }
    if f.use_style_embedding {
        parts.push("1".into());
    }
    if !f.disable_content_prefix {
        parts.push("n".into());
    }
    if parts.is_empty() {
        parts.push("0".into());
    }
    format!(
        "# pst train log\n# config_hash = {}\n# params backbone={} generator={} discriminator={} generator_ratio={:?} trainable_ratio={:?}\n# prefix_len = {}\n# schedule = {} D + {} G per cycle, batch {}\n",
        cfg.hash(),
        c.backbone,
        c.generator,
        c.discriminator,
        c.generator_ratio(),
        c.trainable_ratio(),
        parts.join(" + "),
        cfg.schedule.dis_steps,
        cfg.schedule.gen_steps,
        cfg.schedule.batch_size,
    )
}

/// Draws exactly `k` indices, crossing epoch boundaries when needed.
fn draw(it: &mut BatchIterator, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let b = it.next_batch();
        if b.is_empty() {
            break;
        }
        out.extend(b.into_iter().take(k - out.len()));
    }
    out
}

fn iter_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Options that do not change what is learned.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stop (as if interrupted) once this many steps have been taken.
    pub stop_after: Option<u64>,
    /// Skip best-checkpoint selection (dev evaluation).
    pub no_select: bool,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore<f32>,
    pub gen: Generator,
    pub dis: Discriminator,
    train: Vec<Example>,
    by_style: Vec<Vec<usize>>,
    select_dev: Vec<Example>,
    suite: Option<EvalSuite>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    pub step: u64,
    gen_steps_done: u64,
    style_iters: Vec<BatchIterator>,
    real_iter: BatchIterator,
    fake_iter: BatchIterator,
    pool: VecDeque<Tensor<f32>>,
    best_score: f64,
    pub skipped: u64,
}

impl Trainer {
    /// A fresh run on top of a pretrained backbone. The model shape is taken
    /// from the backbone checkpoint.
    pub fn new(mut cfg: RunConfig, backbone: &Checkpoint, data: &Dataset) -> Result<Self> {
        cfg.model = backbone.config.model.clone();
        cfg.max_sentence_len = backbone.config.max_sentence_len;
        cfg.validate()?;
        let store = store_with_backbone(&cfg, backbone)?;
        Self::build(cfg, backbone.vocab.clone(), store, data, None)
    }

    /// Continues a run from one of its checkpoints.
    pub fn resume(ck: &Checkpoint, data: &Dataset) -> Result<Self> {
        let cfg = ck.config.clone();
        let mut store = ParamStore::init(&crate::params::param_specs(&cfg), cfg.seed);
        restore_params(&mut store, ck, &Group::ALL)?;
        Self::build(cfg, ck.vocab.clone(), store, data, Some(ck))
    }

    fn build(cfg: RunConfig, vocab: Vocab, store: ParamStore<f32>, data: &Dataset, ck: Option<&Checkpoint>) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let s = cfg.prefix.num_styles;
        let mut by_style = vec![Vec::new(); s];
        for (i, e) in data.train.iter().enumerate() {
            if e.style >= s {
                return Err(Error::UnknownStyle(e.style));
            }
            by_style[e.style].push(i);
        }
        if let Some(st) = by_style.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("style {st} has no training sentences")));
        }
        let mut select_dev = Vec::new();
        for st in 0..s {
            select_dev.extend(
                data.dev
                    .iter()
                    .filter(|e| e.style == st)
                    .take(cfg.schedule.select_dev_per_style)
                    .cloned(),
            );
        }
        let gen = Generator::new(&store, &cfg)?;
        let dis = Discriminator::new(&store, &cfg)?;
        let g_ids: Vec<_> = generator_groups(&cfg).iter().flat_map(|&g| store.ids_in(g)).collect();
        let mut opt_g = Adam::new(&cfg.optim, cfg.optim.lr, g_ids, &store);
        let mut opt_d = Adam::new(&cfg.optim, cfg.optim.lr, store.ids_in(Group::Discriminator), &store);

        let b = cfg.schedule.batch_size;
        let state = |key: &str| -> Result<IterState> {
            match ck {
                None => Ok(IterState::default()),
                Some(ck) => Ok(IterState {
                    epoch: ck.meta_parse(&format!("iter.{key}.epoch"))?,
                    pos: ck.meta_parse(&format!("iter.{key}.pos"))?,
                }),
            }
        };
        let mut style_iters = Vec::with_capacity(s);
        for (st, idx) in by_style.iter().enumerate() {
            style_iters.push(BatchIterator::resume(idx.len(), b, iter_seed(cfg.seed, 10 + st as u64), state(&format!("style{st}"))?));
        }
        let real_iter = BatchIterator::resume(data.train.len(), b, iter_seed(cfg.seed, 1), state("real")?);
        let fake_iter = BatchIterator::resume(data.train.len(), b, iter_seed(cfg.seed, 2), state("fake")?);

        let missing = |key: &str| Error::Checkpoint {
            path: String::new(),
            msg: format!("missing tensor `{key}`"),
        };
        let mut pool = VecDeque::new();
        let (mut step, mut gen_steps_done, mut skipped, mut best_score) = (0, 0, 0, f64::NEG_INFINITY);
        if let Some(ck) = ck {
            step = ck.meta_parse("step")?;
            gen_steps_done = ck.meta_parse("gen_steps")?;
            skipped = ck.meta_parse("skipped")?;
            best_score = ck.meta_parse("best_score")?;
            for (opt, tag) in [(&mut opt_g, "g"), (&mut opt_d, "d")] {
                opt.step = ck.meta_parse(&format!("optim.{tag}.step"))?;
                for (k, &id) in opt.ids.iter().enumerate() {
                    let name = store.name(id);
                    for (slot, which) in [(&mut opt.m[k], "m"), (&mut opt.v[k], "v")] {
                        let key = format!("optim.{tag}.{which}.{name}");
                        *slot = ck.tensor(&key).ok_or_else(|| missing(&key))?.clone();
                    }
                }
            }
            let n: usize = ck.meta_parse("pool")?;
            for i in 0..n {
                let key = format!("pool.{i}");
                pool.push_back(ck.tensor(&key).ok_or_else(|| missing(&key))?.clone());
            }
        }
        Ok(Self {
            cfg,
            vocab,
            store,
            gen,
            dis,
            train: data.train.clone(),
            by_style,
            select_dev,
            suite: None,
            opt_g,
            opt_d,
            step,
            gen_steps_done,
            style_iters,
            real_iter,
            fake_iter,
            pool,
            best_score,
            skipped,
        })
    }

    fn pool_capacity(&self) -> usize {
        (self.cfg.schedule.dis_steps * self.cfg.schedule.batch_size).max(1)
    }

    /// Soft transfers of fresh training sentences, without gradients.
    fn fresh_fakes(&mut self, k: usize) -> Result<Vec<Tensor<f32>>> {
        let idx = draw(&mut self.fake_iter, k);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, &[]);
        let fixed = self.gen.fixed(&mut cx)?;
        let mut out = Vec::with_capacity(k);
        for i in idx {
            let e = &self.train[i];
            let target = (e.style + 1) % self.cfg.prefix.num_styles;
            let content = self.gen.content(&mut cx, &fixed, Input::Hard(&e.tokens))?;
            let kv = self
                .gen
                .condition(&mut cx, &fixed, content.as_ref(), target, Input::Hard(&e.tokens))?;
            if let Some(y) = self
                .gen
                .backbone
                .generate_soft(&mut cx, &kv, self.gen.soft_temperature, self.gen.max_len(e.tokens.len()))?
            {
                out.push(cx.g.value(y).clone());
            }
        }
        Ok(out)
    }

    /// One discriminator update.
    pub fn dis_step(&mut self) -> Result<Record> {
        let b = self.cfg.schedule.batch_size.max(2);
        let n_fake = b / 2;
        let mut fakes: Vec<Tensor<f32>> = Vec::with_capacity(n_fake);
        while fakes.len() < n_fake {
            match self.pool.pop_front() {
                Some(t) => fakes.push(t),
                None => break,
            }
        }
        if fakes.len() < n_fake {
            let more = self.fresh_fakes(n_fake - fakes.len())?;
            fakes.extend(more);
        }
        let real = draw(&mut self.real_iter, b - n_fake);
        let fake_class = self.dis.fake_class();
        let mut examples: Vec<(DisExample<'_, f32>, usize)> = Vec::with_capacity(b);
        for &i in &real {
            examples.push((DisExample::Real(&self.train[i].tokens), self.train[i].style));
        }
        for f in &fakes {
            examples.push((DisExample::Fake(f), fake_class));
        }
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, &[Group::Discriminator]);
        let (loss, correct) = dis_objective(&mut cx, &self.dis, &examples)?;
        let value = cx.g.value(loss).item() as f64;
        let grads = cx.gradients(loss, Group::Discriminator)?;
        drop(cx);
        let total = examples.len();
        drop(examples);
        self.step += 1;
        let grad_norm = self.apply(false, value, &grads)?;
        Ok(Record::Dis {
            step: self.step,
            loss: value,
            correct,
            total,
            grad_norm,
        })
    }

    /// Applies an update unless the loss or gradients are not finite.
    fn apply(&mut self, generator: bool, loss: f64, grads: &[(crate::params::ParamId, Tensor<f32>)]) -> Result<Option<f64>> {
        if !loss.is_finite() {
            log::warn!("step {}: non-finite loss, update skipped", self.step);
            self.skipped += 1;
            return Ok(None);
        }
        let opt = if generator { &mut self.opt_g } else { &mut self.opt_d };
        match opt.update(&mut self.store, grads) {
            Ok(n) => Ok(Some(n)),
            Err(Error::NonFinite { .. }) => {
                log::warn!("step {}: non-finite gradient, update skipped", self.step);
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// One generator update on a batch of a single style.
    pub fn gen_step(&mut self) -> Result<Record> {
        let s_count = self.cfg.prefix.num_styles;
        let source = (self.gen_steps_done % s_count as u64) as usize;
        let target = (source + 1) % s_count;
        let picks = draw(&mut self.style_iters[source], self.cfg.schedule.batch_size);
        let batch = Batch::from_examples(picks.iter().map(|&k| &self.train[self.by_style[source][k]]));
        let rows: Vec<&[usize]> = (0..batch.len()).map(|i| batch.row(i)).collect();
        let styles = vec![source; rows.len()];
        let targets = vec![target; rows.len()];
        let groups = generator_groups(&self.cfg);

        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &self.store, &groups);
        let obj = generator_objective(&mut cx, &self.gen, &self.dis, &self.cfg.loss, &rows, &styles, &targets)?;
        let mut grads = Vec::new();
        for &grp in &groups {
            grads.extend(cx.gradients(obj.loss, grp)?);
        }
        let ys: Vec<Tensor<f32>> = obj.ys.iter().map(|&y| cx.g.value(y).clone()).collect();
        drop(cx);
        self.step += 1;
        self.gen_steps_done += 1;
        let l_gen = self.cfg.loss.combine(obj.l_self, obj.l_cycle, obj.l_style);
        let grad_norm = self.apply(true, l_gen, &grads)?;
        let cap = self.pool_capacity();
        for y in ys {
            self.pool.push_back(y);
            while self.pool.len() > cap {
                self.pool.pop_front();
            }
        }
        Ok(Record::Gen {
            step: self.step,
            source,
            target,
            l_self: obj.l_self,
            l_cycle: obj.l_cycle,
            l_style: obj.l_style,
            l_gen,
            grad_norm,
        })
    }

    /// The next step of the schedule.
    pub fn next_step(&mut self) -> Result<Record> {
        match phase_of(&self.cfg, self.step + 1) {
            'D' => self.dis_step(),
            _ => self.gen_step(),
        }
    }

    fn cycle_len(&self) -> u64 {
        (self.cfg.schedule.dis_steps + self.cfg.schedule.gen_steps) as u64
    }

    /// Dev ACC x self-BLEU of the current parameters under greedy decoding.
    pub fn select_score(&mut self) -> Result<(f64, f64, f64)> {
        if self.suite.is_none() {
            self.suite = Some(EvalSuite::train(&self.train, &self.vocab, self.cfg.prefix.num_styles, self.cfg.seed));
        }
        let model = Snapshot { t: self };
        let suite = self.suite.as_ref().expect("suite built above");
        let r = evaluate(suite, &model, &self.select_dev, &self.vocab, self.cfg.prefix.num_styles)?;
        Ok((r.acc, r.self_bleu, r.acc * r.self_bleu / 100.0))
    }

    /// Everything needed to continue the run or to use the model.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.cfg.clone(), self.vocab.clone());
        let meta = &mut ck.meta;
        meta.insert("kind".into(), "model".into());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("gen_steps".into(), self.gen_steps_done.to_string());
        meta.insert("skipped".into(), self.skipped.to_string());
        meta.insert("best_score".into(), format!("{:?}", self.best_score));
        meta.insert("pool".into(), self.pool.len().to_string());
        let mut iters: Vec<(String, IterState)> = vec![
            ("real".into(), self.real_iter.state()),
            ("fake".into(), self.fake_iter.state()),
        ];
        for (s, it) in self.style_iters.iter().enumerate() {
            iters.push((format!("style{s}"), it.state()));
        }
        for (k, st) in iters {
            meta.insert(format!("iter.{k}.epoch"), st.epoch.to_string());
            meta.insert(format!("iter.{k}.pos"), st.pos.to_string());
        }
        ck.tensors = export_params(&self.store, &Group::ALL);
        for (opt, tag) in [(&self.opt_g, "g"), (&self.opt_d, "d")] {
            ck.meta.insert(format!("optim.{tag}.step"), opt.step.to_string());
            for (k, &id) in opt.ids.iter().enumerate() {
                let name = self.store.name(id);
                ck.tensors.push((format!("optim.{tag}.m.{name}"), opt.m[k].clone()));
                ck.tensors.push((format!("optim.{tag}.v.{name}"), opt.v[k].clone()));
            }
        }
        for (i, p) in self.pool.iter().enumerate() {
            ck.tensors.push((format!("pool.{i}"), p.clone()));
        }
        ck
    }

    /// Runs to `total_steps` (or `stop_after`), appending to the log in
    /// `opts.out_dir` and checkpointing at cycle boundaries.
    pub fn run(&mut self, opts: &RunOptions, mut progress: impl FnMut(&Record)) -> Result<()> {
        let dir = &opts.out_dir;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log_path = dir.join(LOG_FILE);
        let mut log = open_log(&log_path, self.step, &self.cfg)?;
        let total = self.cfg.schedule.total_steps as u64;
        let every = self.cfg.schedule.checkpoint_every.max(1) as u64;
        let mut last_saved = self.step;
        let write = |log: &mut File, r: &Record| -> Result<()> {
            writeln!(log, "{r}").map_err(io_err(&log_path))?;
            log.flush().map_err(io_err(&log_path))
        };
        while self.step < total {
            if opts.stop_after.is_some_and(|s| self.step >= s) {
                return Ok(());
            }
            let r = self.next_step()?;
            write(&mut log, &r)?;
            progress(&r);
            let boundary = self.step % self.cycle_len() == 0 || self.step == total;
            if boundary && (self.step / every > last_saved / every || self.step == total) {
                if !opts.no_select {
                    let (acc, self_bleu, score) = self.select_score()?;
                    let best = score > self.best_score;
                    if best {
                        self.best_score = score;
                    }
                    let r = Record::Select {
                        step: self.step,
                        acc,
                        self_bleu,
                        score,
                        best,
                    };
                    write(&mut log, &r)?;
                    progress(&r);
                    let ck = self.checkpoint();
                    if best {
                        ck.save(&dir.join(BEST_CKPT))?;
                    }
                    ck.save(&dir.join(LAST_CKPT))?;
                } else {
                    let ck = self.checkpoint();
                    ck.save(&dir.join(LAST_CKPT))?;
                    ck.save(&dir.join(BEST_CKPT))?;
                }
                last_saved = self.step;
            }
        }
        Ok(())
    }
}

/// Opens the log for appending after `step`: a fresh run writes the header,
/// a resumed one drops every line past the checkpoint.
fn open_log(path: &Path, step: u64, cfg: &RunConfig) -> Result<File> {
    if step == 0 {
        let mut f = File::create(path).map_err(io_err(path))?;
        f.write_all(log_header(cfg).as_bytes()).map_err(io_err(path))?;
        return Ok(f);
    }
    let text = std::fs::read_to_string(path).unwrap_or_else(|_| log_header(cfg));
    let mut kept = String::with_capacity(text.len());
    for line in text.lines() {
        let keep = line.starts_with('#')
            || parse_fields(line)
                .iter()
                .find(|(k, _)| *k == "step")
                .and_then(|(_, v)| v.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))?;
    OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

/// Greedy transfer with a trainer's current parameters.
struct Snapshot<'a> {
    t: &'a Trainer,
}

impl Transfer for Snapshot<'_> {
    fn transfer(&self, x: &[usize], target: usize) -> Result<Vec<usize>> {
        let gen = &self.t.gen;
        gen.transfer(&self.t.store, x, target, Decode::Greedy, gen.max_len(x.len()))
    }
}
