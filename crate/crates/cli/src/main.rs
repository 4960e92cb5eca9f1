//! `pst`: synthesize a corpus, pretrain the backbone, train the style
//! transfer prefixes, transfer sentences and evaluate.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pst_core::checkpoint::Checkpoint;
use pst_core::corpus::{build_vocab, load_dataset, read_lines};
use pst_core::eval::{evaluate, EvalSuite, Identity, MetricsReport, Transfer};
use pst_core::model::{backbone_checkpoint, TransferModel};
use pst_core::params::{param_specs, ParamCounts, ParamStore};
use pst_core::synth::{synth_corpus, SynthSpec};
use pst_core::trainer::{log_header, Record, RunOptions, Trainer, LAST_CKPT, LOG_FILE};
use pst_core::{Error, RunConfig};

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Parser)]
#[command(name = "pst", version, about = "Prefix-tuned unsupervised text style transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic two-style corpus.
    Synth(SynthArgs),
    /// Pretrain the backbone language model on a corpus.
    Pretrain(PretrainArgs),
    /// Train the prefixes and the discriminator on a frozen backbone.
    Train(TrainArgs),
    /// Rewrite sentences into a target style.
    Transfer(TransferArgs),
    /// Score a model (or the identity transfer) on a corpus split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus spec file; the built-in spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding `{split}.{style}.txt` files.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    disable_shared_prefix: bool,
    #[arg(long)]
    disable_style_prefix: bool,
    /// Replace the style prefix by a single style-embedding token.
    #[arg(long)]
    use_style_embedding: bool,
    #[arg(long)]
    disable_content_prefix: bool,
    /// Also train the backbone during generator steps.
    #[arg(long)]
    full_finetune: bool,
}

impl AblationArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let a = &mut cfg.ablation;
        a.disable_shared_prefix |= self.disable_shared_prefix;
        a.disable_style_prefix |= self.disable_style_prefix || self.use_style_embedding;
        a.use_style_embedding |= self.use_style_embedding;
        a.disable_content_prefix |= self.disable_content_prefix;
        a.full_finetune |= self.full_finetune;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    ablation: AblationArgs,
    #[arg(long)]
    corpus: PathBuf,
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from `out_dir/last.ckpt`.
    #[arg(long)]
    resume: bool,
    /// Stop once this many steps have been taken, as if interrupted.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One sentence per line.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// A single sentence.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=1))]
    target_style: u8,
    /// Maximum output length in tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Write outputs here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained model checkpoint.
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,
    /// Score the identity transfer instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()).into());
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthSpec::parse(&text)?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    guard(&a.out_dir.join("train.0.txt"), a.force)?;
    let written = synth_corpus(&spec, &a.out_dir)?;
    eprintln!("wrote {} files to {}", written.len(), a.out_dir.display());
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    let out = a.out_dir.join(BACKBONE_CKPT);
    guard(&out, a.force)?;
    let vocab = build_vocab(&a.corpus, cfg.prefix.num_styles, 1)?;
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    let data = load_dataset(&a.corpus, &vocab, cfg.prefix.num_styles, cfg.max_sentence_len)?;
    eprintln!(
        "pretraining: vocab {} | train {} | {} steps | config {}",
        vocab.len(),
        data.train.len(),
        cfg.pretrain.steps,
        cfg.hash()
    );
    let mut store = ParamStore::<f32>::init(&param_specs(&cfg), cfg.seed);
    let start = Instant::now();
    let mut log = format!("# pst pretrain log\n# config_hash = {}\n", cfg.hash());
    let every = (cfg.pretrain.steps / 20).max(1);
    let trace = pst_core::pretrain::pretrain(&cfg, &mut store, &data.train, |step, loss| {
        if step % every == 0 || step == cfg.pretrain.steps {
            eprintln!("pretrain step {step} loss {loss:.4} ({:.1}s)", start.elapsed().as_secs_f64());
        }
    })?;
    for (i, l) in trace.iter().enumerate() {
        log.push_str(&format!("step={}\tloss={l:?}\n", i + 1));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(a.out_dir.join(PRETRAIN_LOG), log)?;
    backbone_checkpoint(&cfg, &vocab, &store, trace.len() as u64).save(&out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn banner(cfg: &RunConfig) {
    let c = ParamCounts::of(cfg);
    eprintln!(
        "parameters: backbone {} | generator {} | discriminator {} | trainable {:.2}% of total, generator {:.2}% of generator+backbone",
        c.backbone,
        c.generator,
        c.discriminator,
        100.0 * c.trainable_ratio(),
        100.0 * c.generator_ratio()
    );
    for line in log_header(cfg).lines().filter(|l| l.contains("prefix_len")) {
        eprintln!("{}", line.trim_start_matches("# "));
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let last = a.out_dir.join(LAST_CKPT);
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&last).context("--resume needs a previous run in --out-dir")?;
        let data = load_dataset(&a.corpus, &ck.vocab, ck.config.prefix.num_styles, ck.config.max_sentence_len)?;
        eprintln!("resuming from step {}", ck.meta("step").unwrap_or("?"));
        Trainer::resume(&ck, &data)?
    } else {
        guard(&a.out_dir.join(LOG_FILE), a.force)?;
        let mut cfg = a.config.load()?;
        a.ablation.apply(&mut cfg);
        let bb = Checkpoint::load(&a.backbone).context("loading the backbone checkpoint")?;
        if bb.meta("kind") != Some("backbone") {
            bail!("{} is not a backbone checkpoint", a.backbone.display());
        }
        let data = load_dataset(&a.corpus, &bb.vocab, cfg.prefix.num_styles, bb.config.max_sentence_len)?;
        Trainer::new(cfg, &bb, &data)?
    };
    banner(&trainer.cfg);
    eprintln!("config {}", trainer.cfg.hash());
    let opts = RunOptions {
        out_dir: a.out_dir.clone(),
        stop_after: a.stop_after,
        no_select: false,
    };
    let start = Instant::now();
    let report_every = 50;
    trainer.run(&opts, |r| match r {
        Record::Select { .. } => eprintln!("{r} ({:.0}s)", start.elapsed().as_secs_f64()),
        _ if r.step() % report_every == 0 => eprintln!("{r} ({:.0}s)", start.elapsed().as_secs_f64()),
        _ => {}
    })?;
    if trainer.skipped > 0 {
        eprintln!("{} updates skipped for non-finite values", trainer.skipped);
    }
    eprintln!("stopped at step {} in {:.0}s", trainer.step, start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_transfer(a: &TransferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = TransferModel::from_checkpoint(&ck)?;
    model.max_len = a.max_len;
    let lines = match (&a.input, &a.text) {
        (Some(p), None) => read_lines(p)?,
        (None, Some(t)) => vec![t.clone()],
        _ => bail!("give exactly one of --input or --text"),
    };
    let target = a.target_style as usize;
    let mut out = String::new();
    for l in &lines {
        out.push_str(&model.transfer_text(l, target)?);
        out.push('\n');
    }
    match &a.output {
        Some(p) => std::fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().lock().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, vocab, model, name): (RunConfig, _, Box<dyn Transfer>, String) = if a.identity {
        let mut cfg = a.config.load()?;
        let vocab = build_vocab(&a.corpus, cfg.prefix.num_styles, 1)?;
        cfg.model.vocab_size = vocab.len();
        (cfg, vocab, Box::new(Identity), "identity".into())
    } else {
        let path = a.checkpoint.as_ref().expect("clap requires a checkpoint");
        let ck = Checkpoint::load(path)?;
        let mut m = TransferModel::from_checkpoint(&ck)?;
        m.max_len = a.max_len;
        (ck.config.clone(), ck.vocab.clone(), Box::new(m), path.display().to_string())
    };
    let data = load_dataset(&a.corpus, &vocab, cfg.prefix.num_styles, cfg.max_sentence_len)?;
    let split = data.split(&a.split);
    if split.is_empty() {
        bail!("split `{}` is empty", a.split);
    }
    let suite = EvalSuite::train(&data.train, &vocab, cfg.prefix.num_styles, cfg.seed);
    let mut report: MetricsReport = evaluate(&suite, model.as_ref(), split, &vocab, cfg.prefix.num_styles)?;
    report.config_hash = cfg.hash();
    report.checkpoint = name;
    std::fs::create_dir_all(&a.out_dir)?;
    let out = a.out_dir.join(METRICS_FILE);
    report.write(&out)?;
    eprint!("{}", report.to_text());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
