//! Command-line interface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use facaid_core::decoder::{infer_with_prefix, Automaton, DecodeConfig};
use facaid_core::eval::{evaluate, EvalOptions, EvalReport};
use facaid_core::generator::{read_dataset, record_at, write_dataset, DatasetRecord, STYLE_POLICY};
use facaid_core::sizing::optimize_sizing;
use facaid_core::tokenizer::{Vocabulary, DEFAULT_RESOLUTION};
use facaid_core::transformer::checkpoint::{load_checkpoint, save_checkpoint};
use facaid_core::transformer::train::{nll, train, TrainingPair};
use facaid_core::transformer::SeqModel;
use facaid_core::{execute, validate_tree, DerivationTree, RectLayout};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::server::parse_prefix;
use crate::svg::{render_svg, Palette};

#[derive(Debug, Parser)]
#[command(name = "facaid", version, about = "Inverse procedural modeling of facades")]
pub struct Cli {
    /// Master seed; overrides the seeds in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a JSONL dataset of generated (procedure, layout) pairs.
    Generate(GenerateArgs),
    /// Trains a sequence model and writes its checkpoint.
    Train(TrainArgs),
    /// Infers a procedure for a layout.
    Infer(InferArgs),
    /// Fits the sizing parameters of a tree to a target layout.
    Optimize(OptimizeArgs),
    /// Evaluates a checkpoint on a test set.
    Eval(EvalArgs),
    /// Renders a layout or a tree as SVG.
    Render(RenderArgs),
    /// Runs the local HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: u64,
    #[arg(long, default_value = STYLE_POLICY)]
    pub style_policy: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; output does not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also write production and size statistics as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSONL dataset to train on.
    #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
    pub data: Option<PathBuf>,
    /// Generate this many records in memory instead of reading a file.
    #[arg(long)]
    pub generate: Option<u64>,
    /// Receives `model.ckpt`, `last.ckpt`, `best.ckpt` and `train_report.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Coordinate quantization of the vocabulary.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: u32,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, env = "FACAID_MODEL")]
    pub model: PathBuf,
    /// Layout JSON, or a dataset record whose layout is used.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// JSON array of token ids or token strings to resume from.
    #[arg(long)]
    pub resume_prefix: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Tree JSON, or an inference or dataset record holding one.
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV with columns iteration, loss.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "FACAID_MODEL")]
    pub model: PathBuf,
    #[arg(long)]
    pub testset: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Only evaluate the first N records.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Skip the noise curve.
    #[arg(long)]
    pub no_noise: bool,
    /// Measure pixel error with default sizing instead of fitted sizing.
    #[arg(long)]
    pub no_optimize: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, conflicts_with = "tree", required_unless_present = "tree")]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<IpAddr>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, env = "FACAID_MODEL")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub cors: bool,
    /// Maximum request body in bytes.
    #[arg(long)]
    pub body_limit: Option<usize>,
    /// Directory of static UI assets served under `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A bare value, or a record holding it under `layout` or `tree`.
#[derive(Deserialize)]
#[serde(untagged)]
enum Holder<T> {
    Bare(T),
    Layout { layout: T },
    Tree { tree: T },
}

impl<T> Holder<T> {
    fn into_inner(self) -> T {
        match self {
            Holder::Bare(v) | Holder::Layout { layout: v } | Holder::Tree { tree: v } => v,
        }
    }
}

pub fn read_layout(path: &Path) -> Result<RectLayout> {
    Ok(read_json::<Holder<RectLayout>>(path)?.into_inner())
}

pub fn read_tree(path: &Path) -> Result<DerivationTree> {
    let tree = read_json::<Holder<DerivationTree>>(path)?.into_inner();
    let report = validate_tree(&tree);
    ensure!(report.is_empty(), "{} holds an invalid tree: {report}", path.display());
    Ok(tree)
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (header, records) = read_dataset(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        records.len() as u64 == header.count,
        "{} declares {} records but holds {}",
        path.display(),
        header.count,
        records.len()
    );
    Ok(records)
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    match &cli.config {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate(a) => generate(&cli, a),
        Command::Train(a) => train_cmd(&cli, &cfg, a),
        Command::Infer(a) => infer_cmd(&cli, &cfg, a),
        Command::Optimize(a) => optimize_cmd(&cfg, a),
        Command::Eval(a) => eval_cmd(&cli, &cfg, a),
        Command::Render(a) => render_cmd(a),
        Command::Serve(a) => serve_cmd(&cfg, a),
    }
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    ensure!(
        a.style_policy == STYLE_POLICY,
        "unknown style policy `{}`; available: {STYLE_POLICY}",
        a.style_policy
    );
    let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let seed = cli.seed.unwrap_or(0);
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let stats = write_dataset(&mut out, a.count, seed, workers)?;
    out.flush()?;
    log::info!("wrote {} records to {}", a.count, a.out.display());
    if let Some(p) = &a.stats {
        write_json(p, &stats)?;
    }
    Ok(())
}

fn train_cmd(cli: &Cli, cfg: &FileConfig, a: &TrainArgs) -> Result<()> {
    let vocab = Vocabulary::standard(a.resolution)?;
    let records = match (&a.data, a.generate) {
        (Some(p), None) => read_records(p)?,
        (None, Some(n)) => (0..n).map(|i| record_at(cli.seed.unwrap_or(0), i)).collect(),
        _ => bail!("give exactly one of --data and --generate"),
    };
    let pairs = records
        .iter()
        .map(|r| TrainingPair::from_record(r, &vocab))
        .collect::<Result<Vec<_>, _>>()
        .context("tokenizing the dataset")?;

    let mut tc = cfg.train.clone();
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        tc.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if a.max_seconds.is_some() {
        tc.max_seconds = a.max_seconds;
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    tc.checkpoint_dir = Some(a.out_dir.clone());

    let mc = cfg.model_config(&vocab)?;
    let mut model = SeqModel::<f32>::new(mc, tc.seed)?;
    log::info!("training {} parameters on {} pairs", model.param_count(), pairs.len());
    let report = train(&mut model, &vocab, &pairs, &tc, |e| {
        log::info!(
            "epoch {} train {:.4} val {} ({} steps, {:.0}s{})",
            e.epoch,
            e.train_loss,
            e.val_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
            e.steps,
            e.seconds,
            if e.partial { ", partial" } else { "" }
        );
    })?;
    save_checkpoint(&model, &vocab, &a.out_dir.join("model.ckpt"))?;
    write_json(&a.out_dir.join("train_report.json"), &report)?;
    log::info!("stopped ({:?}); best epoch {:?}", report.stop, report.best_epoch);
    Ok(())
}

fn infer_cmd(cli: &Cli, cfg: &FileConfig, a: &InferArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let automaton = Automaton::new(vocab);
    let layout = read_layout(&a.layout)?;
    let prefix = match &a.resume_prefix {
        Some(p) => {
            let items: Vec<serde_json::Value> = read_json(p)?;
            parse_prefix(automaton.vocab(), &items).map_err(anyhow::Error::msg)?
        }
        None => vec![facaid_core::tokenizer::BOS],
    };
    let dc = DecodeConfig {
        temperature: a.temperature.or(cfg.decode.temperature),
        seed: cli.seed.unwrap_or(cfg.decode.seed),
    };
    let inf = infer_with_prefix(&model, &automaton, &layout, &prefix, &dc)?;
    write_json(&a.out, &inf.tree)?;
    log::info!("inferred a tree of {} nodes from {} tokens", inf.tree.size(), inf.tokens.len());
    Ok(())
}

fn optimize_cmd(cfg: &FileConfig, a: &OptimizeArgs) -> Result<()> {
    let tree = read_tree(&a.tree)?;
    let target = read_layout(&a.target)?;
    let (fitted, trace) = optimize_sizing(&tree, &target, &cfg.optimize)?;
    write_json(&a.out, &fitted)?;
    if let Some(p) = &a.trace {
        write_text(p, &trace.to_csv())?;
    }
    log::info!(
        "{} iterations, final loss {:.6} ({:?})",
        trace.losses.len(),
        trace.losses.last().copied().unwrap_or(f64::NAN),
        trace.stop
    );
    Ok(())
}

/// Evaluation report plus test-set likelihoods.
#[derive(Debug, Serialize)]
pub struct EvalFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub nll: f64,
    pub nll_masked: f64,
}

fn eval_cmd(cli: &Cli, cfg: &FileConfig, a: &EvalArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let automaton = Automaton::new(vocab);
    let mut records = read_records(&a.testset)?;
    if let Some(n) = a.limit {
        records.truncate(n);
    }
    ensure!(!records.is_empty(), "empty test set");
    let opts = EvalOptions {
        decode: cfg.decode.clone(),
        optimize: (!a.no_optimize).then(|| cfg.optimize.clone()),
        error_resolution: cfg.eval.error_resolution,
        noise_levels: if a.no_noise { Vec::new() } else { cfg.eval.noise_levels.clone() },
        noise_seed: cli.seed.unwrap_or(cfg.eval.noise_seed),
        noise_resolution: cfg.eval.noise_resolution,
    };
    let report = evaluate(&model, &automaton, &records, &opts)?;
    let pairs = records
        .iter()
        .map(|r| TrainingPair::from_record(r, automaton.vocab()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = EvalFile {
        nll: nll(&model, &automaton, &pairs, false)?,
        nll_masked: nll(&model, &automaton, &pairs, true)?,
        report,
    };
    log::info!(
        "{} samples: median TED {}, mean TED {:.2}, NLL {:.4} (masked {:.4})",
        out.report.samples,
        out.report.median_ted,
        out.report.mean_ted,
        out.nll,
        out.nll_masked
    );
    write_json(&a.report, &out)
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let layout = match (&a.layout, &a.tree) {
        (Some(p), None) => read_layout(p)?,
        (None, Some(p)) => execute(&read_tree(p)?)?,
        _ => bail!("give exactly one of --layout and --tree"),
    };
    write_text(&a.out, &render_svg(&layout, &Palette::default()))
}

fn serve_cmd(cfg: &FileConfig, a: &ServeArgs) -> Result<()> {
    let mut sc = cfg.serve.clone();
    if let Some(b) = a.bind {
        sc.bind = b.to_string();
    }
    if let Some(p) = a.port {
        sc.port = p;
    }
    if a.model.is_some() {
        sc.model = a.model.clone();
    }
    sc.cors |= a.cors;
    if let Some(l) = a.body_limit {
        sc.body_limit = l;
    }
    if a.static_dir.is_some() {
        sc.static_dir = a.static_dir.clone();
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::server::serve(sc))?;
    Ok(())
}
