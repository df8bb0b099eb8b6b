//! Command-line front end. Every subcommand writes into its own directory
//! under the output root together with a `manifest.json` that is written
//! before work starts and finalized once all outputs exist and parse.
//!
//! Configuration is layered: built-in defaults, then an optional JSON file
//! (`--config`, any subset of [`BenchmarkConfig`]), then individual flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{
    answer_prompt, read_jsonl, serialize, write_jsonl, ConversationError, ConversationSample, MaskMode, Record, Turn,
};
use crate::experiment::{run_cell, Benchmark, BenchmarkConfig, ExperimentError};
use crate::metrics::{
    self, aggregate, answer_accuracy, attention_probe, bench_samples, chair, config_hash, evaluate, split_lengths,
    throughput_bench, write_attention_csv, write_sample_csv, MetricsError, Report,
};
use crate::model::{generate, GenerateConfig, ModelError, TinyMLLM};
use crate::synthworld::{gen_dataset, gen_pretrain_pairs, LeakChannel, TaskMix, CAPTION_PROMPTS, OBJECTS};
use crate::templates::{mine_templates, TemplateError, TemplateSet};
use crate::trainer::{finetune, self_generate, PreparedSample, TrainConfig, TrainError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "L2TLAB_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("output {path} failed validation: {reason}")]
    Validation { path: String, reason: String },
}

impl CliError {
    /// Stable name for the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Csv(_) => "csv",
            CliError::Experiment(_) => "experiment",
            CliError::Train(_) => "train",
            CliError::Model(_) => "model",
            CliError::Metrics(_) => "metrics",
            CliError::Conversation(_) => "data",
            CliError::Template(_) => "templates",
            CliError::Usage(_) => "usage",
            CliError::Validation { .. } => "validation",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "l2tlab", version, about = "Response-only vs instruction-supervised tuning of tiny multimodal decoders")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::GenData(_) => "gen-data",
            Command::MineTemplates(_) => "mine-templates",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Chair(_) => "chair",
            Command::Bench(_) => "bench",
            Command::Ablate(_) => "ablate",
            Command::Selfgen(_) => "selfgen",
        }
    }
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "l2tlab-out")]
    pub out: PathBuf,
    /// JSON file with any subset of the benchmark configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

/// Flags that override configuration fields.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Records generated, train plus held-out.
    #[arg(long)]
    pub n: Option<usize>,
    /// Leading records used for training.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Image-caption pairs for connector pretraining.
    #[arg(long)]
    pub pretrain_n: Option<usize>,
    /// Probability that the question phrasing reveals the answer.
    #[arg(long)]
    pub leak_prob: Option<f64>,
    /// `phrasing` or `answer_prior`.
    #[arg(long)]
    pub leak_channel: Option<LeakChannel>,
    /// Task mixture, e.g. `qa=0.4,caption=0.6`.
    #[arg(long)]
    pub mix: Option<TaskMix>,
    /// Template frequency threshold, as a fraction of samples.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Fine-tuning peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fine-tuning batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fine-tuning epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pretraining peak learning rate.
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// Pretraining epochs.
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Noise images averaged per sample for visual contribution.
    #[arg(long)]
    pub vc_noise_draws: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and pretraining pairs.
    GenData(GenDataArgs),
    /// Mine task templates from training instructions.
    MineTemplates(MineArgs),
    /// Train the connector on image-caption pairs.
    Pretrain(PretrainArgs),
    /// Instruction-tune a pretrained checkpoint under a mask mode.
    Finetune(FinetuneArgs),
    /// Accuracy, response NLL, visual contribution and attention probes.
    Eval(EvalArgs),
    /// Generate captions and score object hallucination.
    Chair(ChairArgs),
    /// Training throughput across instruction/response length ratios.
    Bench(BenchArgs),
    /// Run the mode x data-fraction x task x seed matrix.
    Ablate(AblateArgs),
    /// Generate instruction-response pairs from images alone.
    Selfgen(SelfgenArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory written by `gen-data` (default `<out>/data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Template file to use instead of mining.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "l2t")]
    pub mask_mode: MaskMode,
    /// Starting checkpoint (default `<out>/pretrain/model.ckpt`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Start from a fresh model instead of a pretrained checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    /// Extra training records appended to the training split.
    #[arg(long)]
    pub extra_train: Option<PathBuf>,
    /// Output subdirectory name (default `finetune-<mode>`).
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Acc,
    Nll,
    Vc,
    Attn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values = ["acc", "nll", "vc", "attn"])]
    pub metric: Vec<Metric>,
    #[arg(long, value_delimiter = ',', default_values = ["test"])]
    pub split: Vec<Split>,
    /// Samples per split; defaults to the whole test split and
    /// `train_eval_n` training samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Full attention matrices dumped for this many samples per split.
    #[arg(long, default_value_t = 4)]
    pub attn_dump: usize,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Decode {
    Greedy,
    Beam5,
}

impl Decode {
    fn config(self, max_new: usize) -> GenerateConfig {
        match self {
            Decode::Greedy => GenerateConfig::greedy(max_new),
            Decode::Beam5 => GenerateConfig::beam(5, max_new),
        }
    }
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Held-out images captioned.
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    #[arg(long, value_enum, default_value_t = Decode::Greedy)]
    pub decode: Decode,
    #[arg(long, default_value_t = 512)]
    pub max_new: usize,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Instruction-to-response length ratios.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 1.0, 10.0, 20.0])]
    pub ratios: Vec<f64>,
    /// Instruction plus response words per sample.
    #[arg(long, default_value_t = 64)]
    pub total_len: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [MaskMode::Vit, MaskMode::L2t])]
    pub modes: Vec<MaskMode>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = MaskMode::ALL)]
    pub modes: Vec<MaskMode>,
    /// Seeds `0..seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Prefix fractions of the training split.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub data_frac: Vec<f64>,
    /// `all` for the configured mixture, or a task kind that then makes up
    /// 90% of the data.
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("all")])]
    pub tasks: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SelfgenArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training images prompted.
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    #[arg(long, value_enum, default_value_t = Decode::Greedy)]
    pub decode: Decode,
    #[arg(long, default_value_t = 96)]
    pub max_new: usize,
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config: BenchmarkConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Input file path to SHA-256.
    pub dataset_hashes: BTreeMap<String, String>,
    pub code_version: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub complete: bool,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// A manifest in progress; outputs are registered as they are written.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(dir: PathBuf, command: &str, cfg: &BenchmarkConfig, seeds: Vec<u64>, inputs: &[PathBuf]) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let mut dataset_hashes = BTreeMap::new();
        for p in inputs {
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "input {} not found (gen-data writes the data directory, pretrain and finetune the checkpoints)",
                    p.display()
                )));
            }
            dataset_hashes.insert(p.display().to_string(), sha256_file(p)?);
        }
        let run = Run {
            dir,
            manifest: RunManifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                command: command.to_string(),
                config: cfg.clone(),
                config_hash: config_hash(cfg)?,
                seeds,
                dataset_hashes,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                outputs: Vec::new(),
                started_unix: now(),
                finished_unix: None,
                complete: false,
            },
        };
        run.write()?;
        Ok(run)
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.manifest.outputs.push(name.to_string());
        Ok(p)
    }

    fn write(&self) -> Result<()> {
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    fn finish(mut self) -> Result<RunManifest> {
        for name in &self.manifest.outputs {
            validate_output(&self.dir.join(name))?;
        }
        self.manifest.finished_unix = Some(now());
        self.manifest.complete = true;
        self.write()?;
        Ok(self.manifest)
    }
}

/// Exists, is non-empty, and parses according to its extension.
pub fn validate_output(path: &Path) -> Result<()> {
    let fail = |reason: String| CliError::Validation {
        path: path.display().to_string(),
        reason,
    };
    let meta = fs::metadata(path).map_err(|e| fail(e.to_string()))?;
    if meta.len() == 0 {
        return Err(fail("empty".into()));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let v: serde_json::Value = serde_json::from_slice(&fs::read(path)?).map_err(|e| fail(e.to_string()))?;
            if v.get("schema_version").is_none() {
                return Err(fail("missing schema_version".into()));
            }
        }
        Some("jsonl") => {
            read_jsonl(path).map_err(|e| fail(e.to_string()))?;
        }
        Some("csv") => {
            let mut r = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
            for rec in r.records() {
                rec.map_err(|e| fail(e.to_string()))?;
            }
        }
        Some("ckpt") => {
            TinyMLLM::load(path).map_err(|e| fail(e.to_string()))?;
        }
        Some("txt") => {
            TemplateSet::load(path).map_err(|e| fail(e.to_string()))?;
        }
        _ => {}
    }
    Ok(())
}

/// Objects merge key by key; anything else replaces.
fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(file: Option<&Path>, flags: &ConfigArgs) -> Result<BenchmarkConfig> {
    let mut cfg = match file {
        Some(p) => {
            let mut base = serde_json::to_value(BenchmarkConfig::default())?;
            merge_json(&mut base, serde_json::from_slice(&fs::read(p)?)?);
            serde_json::from_value(base)?
        }
        None => BenchmarkConfig::default(),
    };
    let f = flags;
    if let Some(v) = f.n {
        cfg.n = v;
    }
    if let Some(v) = f.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = f.pretrain_n {
        cfg.pretrain_n = v;
    }
    if let Some(v) = f.leak_prob {
        cfg.shortcut.leak_prob = v;
    }
    if let Some(v) = f.leak_channel {
        cfg.shortcut.leak_channel = v;
    }
    if let Some(v) = &f.mix {
        cfg.mix = v.clone();
    }
    if let Some(v) = f.theta {
        cfg.theta = v;
    }
    if let Some(v) = f.lr {
        cfg.finetune.lr_peak = v;
    }
    if let Some(v) = f.batch_size {
        cfg.finetune.batch_size = v;
    }
    if let Some(v) = f.epochs {
        cfg.finetune.epochs = v;
    }
    if let Some(v) = f.pretrain_lr {
        cfg.pretrain.lr_peak = v;
    }
    if let Some(v) = f.pretrain_epochs {
        cfg.pretrain.epochs = v;
    }
    if let Some(v) = f.vc_noise_draws {
        cfg.eval.vc_noise_draws = v;
    }
    if cfg.n_train == 0 || cfg.n_train > cfg.n {
        return Err(CliError::Usage(format!("n_train {} must be in 1..={}", cfg.n_train, cfg.n)));
    }
    if !(0.0..=1.0).contains(&cfg.shortcut.leak_prob) {
        return Err(CliError::Usage("leak_prob must be in [0, 1]".into()));
    }
    cfg.pretrain.validate()?;
    cfg.finetune.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    let g = &cli.global;
    let out = &g.out;
    let cfg_file = g.config.as_deref();
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(out, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::MineTemplates(a) => cmd_mine_templates(out, &a.data, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Pretrain(a) => cmd_pretrain(out, &a.data, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Finetune(a) => cmd_finetune(out, a, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Eval(a) => cmd_eval(out, a, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Chair(a) => cmd_chair(out, a, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Bench(a) => cmd_bench(out, a, &resolve_config(cfg_file, &a.cfg)?, g.seed),
        Command::Ablate(a) => cmd_ablate(out, a, &resolve_config(cfg_file, &a.cfg)?),
        Command::Selfgen(a) => cmd_selfgen(out, a, &resolve_config(cfg_file, &a.cfg)?, g.seed),
    }
}

const DATA_FILES: [&str; 3] = ["train.jsonl", "test.jsonl", "pretrain.jsonl"];

pub fn cmd_gen_data(out: &Path, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let mut run = Run::start(out.join("data"), "gen-data", cfg, vec![seed], &[])?;
    let (train, test) = gen_dataset(&cfg.gen_config(seed)).map_err(ExperimentError::from)?;
    let pretrain = gen_pretrain_pairs(cfg.pretrain_n, seed, 3, 4);
    for (name, recs) in DATA_FILES.iter().zip([&train, &test, &pretrain]) {
        write_jsonl(&run.path(name)?, recs)?;
    }
    run.finish()
}

fn data_dir(out: &Path, data: &DataArgs) -> PathBuf {
    data.data.clone().unwrap_or_else(|| out.join("data"))
}

fn data_inputs(out: &Path, data: &DataArgs) -> Vec<PathBuf> {
    let dir = data_dir(out, data);
    let mut v: Vec<PathBuf> = DATA_FILES.iter().map(|f| dir.join(f)).collect();
    v.extend(data.templates.clone());
    v
}

/// Rebuilds the prepared benchmark from a data directory. Vocabulary and
/// templates are pure functions of the files, so every command sees the
/// same token ids.
pub fn load_benchmark(out: &Path, data: &DataArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    let dir = data_dir(out, data);
    let mut recs = Vec::new();
    for f in DATA_FILES {
        let p = dir.join(f);
        if !p.exists() {
            return Err(CliError::Usage(format!("{} not found; run gen-data first", p.display())));
        }
        recs.push(read_jsonl(&p)?);
    }
    let templates = data.templates.as_deref().map(TemplateSet::load).transpose()?;
    let pretrain = recs.pop().unwrap_or_default();
    let test = recs.pop().unwrap_or_default();
    let train = recs.pop().unwrap_or_default();
    Ok(Benchmark::from_records(cfg, seed, train, test, pretrain, templates)?)
}

fn load_model(path: &Path, bench: &Benchmark) -> Result<TinyMLLM> {
    let model = TinyMLLM::load(path)?;
    if model.config().vocab_size != bench.pre.vocab.len() {
        return Err(CliError::Usage(format!(
            "{} has vocabulary size {}, the data gives {}",
            path.display(),
            model.config().vocab_size,
            bench.pre.vocab.len()
        )));
    }
    Ok(model)
}

pub fn cmd_mine_templates(out: &Path, data: &DataArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let train_path = data_dir(out, data).join("train.jsonl");
    let mut run = Run::start(out.join("templates"), "mine-templates", cfg, vec![seed], std::slice::from_ref(&train_path))?;
    let train = read_jsonl(&train_path)?;
    let set = mine_templates(
        train
            .iter()
            .flat_map(|r| r.sample.turns.iter().map(|t| t.instruction.as_str())),
        cfg.theta,
    )?;
    set.save(&run.path("templates.txt")?)?;
    run.finish()
}

pub fn cmd_pretrain(out: &Path, data: &DataArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let mut run = Run::start(out.join("pretrain"), "pretrain", cfg, vec![seed], &data_inputs(out, data))?;
    let bench = load_benchmark(out, data, cfg, seed)?;
    let (model, log) = bench.pretrained_model(cfg)?;
    model.save(&run.path("model.ckpt")?)?;
    log.write_csv(&run.path("log.csv")?)?;
    run.finish()
}

pub fn cmd_finetune(out: &Path, a: &FinetuneArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let name = a.name.clone().unwrap_or_else(|| format!("finetune-{}", a.mask_mode.name()));
    let init = a.init.clone().unwrap_or_else(|| out.join("pretrain").join("model.ckpt"));
    let mut inputs = data_inputs(out, &a.data);
    if !a.from_scratch {
        inputs.push(init.clone());
    }
    inputs.extend(a.extra_train.clone());
    let mut run = Run::start(out.join(name), "finetune", cfg, vec![seed], &inputs)?;
    let bench = load_benchmark(out, &a.data, cfg, seed)?;
    let mut model = if a.from_scratch {
        TinyMLLM::new(bench.model_config(cfg))?
    } else {
        load_model(&init, &bench)?
    };
    let mut train = bench.train.clone();
    if let Some(p) = &a.extra_train {
        train.extend(bench.pre.prepare(&read_jsonl(p)?)?);
    }
    let tc = TrainConfig {
        mask_mode: a.mask_mode,
        seed,
        from_scratch: a.from_scratch,
        ..cfg.finetune.clone()
    };
    let log = finetune(&mut model, &train, &tc)?;
    model.save(&run.path("model.ckpt")?)?;
    log.write_csv(&run.path("log.csv")?)?;
    run.finish()
}

pub fn cmd_eval(out: &Path, a: &EvalArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let name = a.name.clone().unwrap_or_else(|| "eval".into());
    let mut inputs = data_inputs(out, &a.data);
    inputs.push(a.ckpt.clone());
    let mut run = Run::start(out.join(name), "eval", cfg, vec![seed], &inputs)?;
    let bench = load_benchmark(out, &a.data, cfg, seed)?;
    let model = load_model(&a.ckpt, &bench)?;
    let mut report = Report::new(config_hash(cfg)?);
    let wants = |m: Metric| a.metric.contains(&m);
    for &split in &a.split {
        let (tag, samples): (&str, &[PreparedSample]) = match split {
            Split::Test => ("test", &bench.test),
            Split::Train => ("train", &bench.train),
        };
        let default_n = if split == Split::Train { cfg.train_eval_n } else { samples.len() };
        let samples = &samples[..a.limit.unwrap_or(default_n).min(samples.len())];
        if wants(Metric::Acc) {
            let acc = answer_accuracy(&model, samples, &bench.pre, cfg.answer_max_new)?;
            report.metrics.insert(format!("{tag}.accuracy"), acc);
        }
        if wants(Metric::Nll) || wants(Metric::Vc) || wants(Metric::Attn) {
            let per = evaluate(&model, samples, &cfg.eval)?;
            let agg = aggregate(&per);
            if wants(Metric::Nll) {
                report.metrics.insert(format!("{tag}.mean_response_nll"), agg.mean_response_nll);
            }
            if wants(Metric::Vc) {
                report.metrics.insert(format!("{tag}.mean_vc"), agg.mean_vc);
                report.metrics.insert(format!("{tag}.mean_vc_per_token"), agg.mean_vc_per_token);
            }
            if wants(Metric::Attn) {
                report.metrics.insert(format!("{tag}.mean_attn_visual"), agg.mean_attn_visual);
                for s in samples.iter().take(a.attn_dump) {
                    let probe = attention_probe(&model, s)?;
                    write_attention_csv(&run.path(&format!("attention/{tag}_{}.csv", s.id))?, &probe)?;
                }
            }
            let csv_name = format!("{tag}_samples.csv");
            write_sample_csv(&run.path(&csv_name)?, &per)?;
            report.per_sample_csv.push(csv_name);
        }
    }
    report.write(&run.path("report.json")?)?;
    run.finish()
}

#[derive(Debug, Serialize)]
struct ChairFile {
    schema_version: u32,
    decode: String,
    chair_s: f64,
    chair_i: f64,
    n_captions: usize,
    n_mentioned: usize,
    n_hallucinated: usize,
}

/// Caption prompt for one record: the first caption instruction, cut at the
/// assistant tag.
fn caption_prompt(bench: &Benchmark, r: &Record) -> Result<Vec<usize>> {
    let sample = ConversationSample {
        image_id: r.sample.image_id.clone(),
        turns: vec![Turn {
            instruction: CAPTION_PROMPTS[0].to_string(),
            response: ".".to_string(),
        }],
        task_kind: crate::conversation::TaskKind::Caption,
    };
    let ser = serialize(&sample, &bench.pre.chat, &bench.pre.templates, &bench.pre.vocab)?;
    Ok(answer_prompt(&ser).to_vec())
}

pub fn cmd_chair(out: &Path, a: &ChairArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let name = a.name.clone().unwrap_or_else(|| "chair".into());
    let mut inputs = data_inputs(out, &a.data);
    inputs.push(a.ckpt.clone());
    let mut run = Run::start(out.join(name), "chair", cfg, vec![seed], &inputs)?;
    let bench = load_benchmark(out, &a.data, cfg, seed)?;
    let model = load_model(&a.ckpt, &bench)?;
    let decode = a.decode.config(a.max_new);
    let images = &bench.test_records[..a.images.min(bench.test_records.len())];
    let mut captions = Vec::with_capacity(images.len());
    for r in images {
        let prompt = caption_prompt(&bench, r)?;
        let ids = generate(&model, Some(crate::model::Visual::Feature(&r.image)), &prompt, &decode)?;
        captions.push(bench.pre.vocab.decode(&ids).map_err(TrainError::from)?);
    }
    let gt: Vec<Vec<String>> = images.iter().map(|r| r.gt_objects.clone()).collect();
    let vocab = OBJECTS.iter().map(|s| s.to_string()).collect();
    let rep = chair(&captions, &gt, &vocab)?;
    let mut w = csv::Writer::from_path(run.path("captions.csv")?)?;
    w.write_record(["image_id", "caption", "mentioned", "hallucinated", "flagged"])?;
    for ((r, c), s) in images.iter().zip(&captions).zip(&rep.per_sample) {
        w.write_record([
            r.sample.image_id.as_str(),
            c,
            &s.mentioned.join(" "),
            &s.hallucinated.join(" "),
            if s.flagged { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    let file = ChairFile {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        decode: format!("{:?}", a.decode).to_lowercase(),
        chair_s: rep.chair_s,
        chair_i: rep.chair_i,
        n_captions: rep.n_captions,
        n_mentioned: rep.n_mentioned,
        n_hallucinated: rep.n_hallucinated,
    };
    fs::write(run.path("report.json")?, serde_json::to_string_pretty(&file)?)?;
    run.finish()
}

pub fn cmd_bench(out: &Path, a: &BenchArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let mut run = Run::start(out.join("bench"), "bench", cfg, vec![seed], &[])?;
    // only the vocabulary matters here
    let small = BenchmarkConfig {
        n: 200,
        n_train: 150,
        pretrain_n: 8,
        ..cfg.clone()
    };
    let bench = Benchmark::build(&small, seed)?;
    let mc = bench.model_config(cfg);
    let model = TinyMLLM::new(mc.clone())?;
    let mut w = csv::Writer::from_path(run.path("bench.csv")?)?;
    w.write_record([
        "ratio",
        "l_i",
        "l_a",
        "mode",
        "batch",
        "timed_steps",
        "mean_step_ms",
        "steps_per_s",
        "samples_per_s",
    ])?;
    for (i, &ratio) in a.ratios.iter().enumerate() {
        if !(ratio > 0.0) {
            return Err(CliError::Usage(format!("ratio {ratio} must be positive")));
        }
        let (li, la) = split_lengths(ratio, a.total_len);
        let samples = bench_samples(&bench.pre, ratio, a.total_len, mc.feature_dim, 64, seed + i as u64)?;
        for r in throughput_bench(&model, &samples, &a.modes, a.batch, a.steps)? {
            w.write_record([
                ratio.to_string(),
                li.to_string(),
                la.to_string(),
                r.mode.name().to_string(),
                r.batch.to_string(),
                r.timed_steps.to_string(),
                format!("{:.4}", r.mean_step_ms),
                format!("{:.4}", r.steps_per_s),
                format!("{:.4}", r.samples_per_s),
            ])?;
        }
    }
    w.flush()?;
    run.finish()
}

fn task_mix(task: &str) -> Result<Option<TaskMix>> {
    if task == "all" {
        return Ok(None);
    }
    let kind = task.parse().map_err(CliError::Usage)?;
    Ok(Some(TaskMix::dominated_by(kind, 0.1)))
}

#[derive(Debug, Serialize, Deserialize)]
struct CellFile {
    schema_version: u32,
    config_hash: String,
    task: String,
    data_frac: f64,
    result: crate::experiment::CellResult,
}

pub fn cmd_ablate(out: &Path, a: &AblateArgs, cfg: &BenchmarkConfig) -> Result<RunManifest> {
    if a.seeds == 0 || a.modes.is_empty() {
        return Err(CliError::Usage("need at least one seed and one mode".into()));
    }
    if a.data_frac.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(CliError::Usage("data fractions must be in (0, 1]".into()));
    }
    let mut run = Run::start(out.join("ablate"), "ablate", cfg, (0..a.seeds).collect(), &[])?;
    let mut rows: Vec<(String, u64, f64, String, String, f64)> = Vec::new();
    for task in &a.tasks {
        let mut tcfg = cfg.clone();
        if let Some(mix) = task_mix(task)? {
            tcfg.mix = mix;
        }
        let hash = config_hash(&tcfg)?;
        for seed in 0..a.seeds {
            let mut bench: Option<(Benchmark, TinyMLLM)> = None;
            for &frac in &a.data_frac {
                for &mode in &a.modes {
                    let cell_name = format!("cells/{task}-f{frac}-s{seed}-{}/cell.json", mode.name());
                    let path = run.path(&cell_name)?;
                    let cached = fs::read(&path)
                        .ok()
                        .and_then(|b| serde_json::from_slice::<CellFile>(&b).ok())
                        .filter(|c| c.config_hash == hash);
                    let result = match cached {
                        Some(c) => c.result,
                        None => {
                            if bench.is_none() {
                                let b = Benchmark::build(&tcfg, seed)?;
                                let (p, _) = b.pretrained_model(&tcfg)?;
                                bench = Some((b, p));
                            }
                            let (b, pretrained) = bench.as_ref().expect("built above");
                            let n = ((b.train.len() as f64 * frac).round() as usize).max(1);
                            let cell = run_cell(b, pretrained, &tcfg, mode, Some(&b.train[..n]))?;
                            let file = CellFile {
                                schema_version: MANIFEST_SCHEMA_VERSION,
                                config_hash: hash.clone(),
                                task: task.clone(),
                                data_frac: frac,
                                result: cell.result,
                            };
                            fs::write(&path, serde_json::to_string_pretty(&file)?)?;
                            file.result
                        }
                    };
                    eprintln!(
                        "ablate {task} frac {frac} seed {seed} {}: acc {:.4} nll {:.4} vc {:.4}",
                        mode.name(),
                        result.test_accuracy,
                        result.test_response_nll,
                        result.test_vc
                    );
                    for (metric, value) in [
                        ("accuracy", result.test_accuracy),
                        ("response_nll", result.test_response_nll),
                        ("train_response_nll", result.train_response_nll),
                        ("vc", result.test_vc),
                        ("vc_per_token", result.test_vc_per_token),
                        ("attn_visual", result.test_attn_visual),
                    ] {
                        rows.push((mode.name().into(), seed, frac, task.clone(), metric.into(), value));
                    }
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(run.path("results.csv")?)?;
    w.write_record(["mode", "seed", "data_frac", "task", "metric", "value"])?;
    for (mode, seed, frac, task, metric, value) in rows {
        w.write_record([mode, seed.to_string(), frac.to_string(), task, metric, format!("{value:e}")])?;
    }
    w.flush()?;
    run.finish()
}

#[derive(Debug, Serialize)]
struct SelfgenFile {
    schema_version: u32,
    attempted: usize,
    malformed: usize,
    malformed_rate: f64,
    generated: usize,
}

pub fn cmd_selfgen(out: &Path, a: &SelfgenArgs, cfg: &BenchmarkConfig, seed: u64) -> Result<RunManifest> {
    let mut inputs = data_inputs(out, &a.data);
    inputs.push(a.ckpt.clone());
    let mut run = Run::start(out.join("selfgen"), "selfgen", cfg, vec![seed], &inputs)?;
    let bench = load_benchmark(out, &a.data, cfg, seed)?;
    let model = load_model(&a.ckpt, &bench)?;
    let (generated, rep) = self_generate(
        &model,
        &bench.train_records,
        a.images,
        &bench.pre,
        &a.decode.config(a.max_new),
        3,
    )?;
    if generated.is_empty() {
        return Err(CliError::Usage(format!(
            "all {} generations were malformed; fine-tune under an instruction-supervising mode first",
            rep.attempted
        )));
    }
    write_jsonl(&run.path("generated.jsonl")?, &generated)?;
    let mut merged = bench.train_records.clone();
    merged.extend(generated.iter().cloned());
    write_jsonl(&run.path("merged.jsonl")?, &merged)?;
    let file = SelfgenFile {
        schema_version: MANIFEST_SCHEMA_VERSION,
        attempted: rep.attempted,
        malformed: rep.malformed,
        malformed_rate: rep.malformed_rate(),
        generated: generated.len(),
    };
    fs::write(run.path("report.json")?, serde_json::to_string_pretty(&file)?)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"n": 500, "n_train": 400, "theta": 0.05, "pretrain": {"batch_size": 4}}"#).unwrap();
        let flags = ConfigArgs {
            n_train: Some(300),
            ..Default::default()
        };
        let cfg = resolve_config(Some(&p), &flags).unwrap();
        assert_eq!((cfg.n, cfg.n_train, cfg.theta), (500, 300, 0.05));
        assert_eq!(cfg.finetune, BenchmarkConfig::default().finetune);
        // nested sections keep their own defaults
        assert_eq!(cfg.pretrain.stage, crate::trainer::Stage::Pretrain);
        assert_eq!(cfg.pretrain.batch_size, 4);
        let bad = ConfigArgs {
            n_train: Some(600),
            ..Default::default()
        };
        assert!(matches!(resolve_config(Some(&p), &bad), Err(CliError::Usage(_))));
    }

    #[test]
    fn validation_catches_missing_and_unversioned_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        assert!(validate_output(&p).is_err());
        fs::write(&p, "{}").unwrap();
        assert!(matches!(validate_output(&p), Err(CliError::Validation { .. })));
        fs::write(&p, r#"{"schema_version": 1}"#).unwrap();
        validate_output(&p).unwrap();
    }

    #[test]
    fn task_names() {
        assert!(task_mix("all").unwrap().is_none());
        assert!(task_mix("qa").unwrap().is_some());
        assert!(task_mix("grounding").is_err());
    }
}
