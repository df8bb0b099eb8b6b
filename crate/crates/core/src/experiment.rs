//! End-to-end runs on the synthetic benchmark: data, templates, vocabulary,
//! pretraining, fine-tuning under a mask mode, and evaluation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{ChatTemplate, MaskMode, Record};
use crate::metrics::{self, aggregate, answer_accuracy, evaluate, EvalConfig, MetricsError, SampleMetrics};
use crate::model::{MllmConfig, ModelError, TinyMLLM};
use crate::synthworld::{gen_dataset, gen_pretrain_pairs, GenConfig, LeakChannel, ShortcutConfig, SynthError, SynthImage};
use crate::templates::{mine_templates, TemplateError, TemplateSet, DEFAULT_THETA};
use crate::trainer::{build_vocab, finetune, pretrain, PreparedSample, Preprocessor, Stage, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Records generated; the last `n - n_train` are held out.
    pub n: usize,
    pub n_train: usize,
    pub pretrain_n: usize,
    pub shortcut: ShortcutConfig,
    pub mix: crate::synthworld::TaskMix,
    pub theta: f64,
    pub vocab_max: usize,
    pub model: MllmConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    /// Generation budget when scoring answers.
    pub answer_max_new: usize,
    /// Training samples scored for the train-side NLL.
    pub train_eval_n: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n: 11_000,
            n_train: 10_000,
            pretrain_n: 558,
            shortcut: ShortcutConfig {
                leak_prob: 0.9,
                leak_channel: LeakChannel::Phrasing,
            },
            mix: Default::default(),
            theta: DEFAULT_THETA,
            vocab_max: 512,
            model: MllmConfig::default(),
            pretrain: TrainConfig::desk(Stage::Pretrain),
            finetune: TrainConfig::desk(Stage::Finetune),
            eval: EvalConfig::default(),
            answer_max_new: 24,
            train_eval_n: 1000,
        }
    }
}

impl BenchmarkConfig {
    /// Seconds-scale preset: a few hundred records and a one-layer model.
    pub fn small() -> Self {
        let mut cfg = Self {
            n: 240,
            n_train: 200,
            pretrain_n: 40,
            model: MllmConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                d_enc: 8,
                max_seq_len: 96,
                ..MllmConfig::default()
            },
            train_eval_n: 50,
            answer_max_new: 8,
            ..Self::default()
        };
        cfg.pretrain.batch_size = 4;
        cfg.finetune.batch_size = 8;
        cfg.eval.batch = 16;
        cfg
    }

    pub fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            n: self.n,
            mix: self.mix.clone(),
            shortcut: self.shortcut,
            seed,
            split: self.n_train as f64 / self.n as f64,
            grid_size: 3,
            max_objects: 4,
        }
    }
}

/// Prepared data of one benchmark seed.
pub struct Benchmark {
    pub seed: u64,
    pub pre: Preprocessor,
    pub train_records: Vec<Record>,
    pub test_records: Vec<Record>,
    pub pretrain_records: Vec<Record>,
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub pretrain: Vec<PreparedSample>,
}

impl Benchmark {
    pub fn build(cfg: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let (train_records, test_records) = gen_dataset(&cfg.gen_config(seed))?;
        let pretrain_records = gen_pretrain_pairs(cfg.pretrain_n, seed, 3, 4);
        Self::from_records(cfg, seed, train_records, test_records, pretrain_records, None)
    }

    /// Task templates are mined from the training instructions unless given.
    pub fn from_records(
        cfg: &BenchmarkConfig,
        seed: u64,
        train_records: Vec<Record>,
        test_records: Vec<Record>,
        pretrain_records: Vec<Record>,
        templates: Option<TemplateSet>,
    ) -> Result<Self> {
        let chat = ChatTemplate::with_slots(cfg.model.n_visual_tokens);
        let mut templates = match templates {
            Some(t) => t,
            None => mine_templates(
                train_records
                    .iter()
                    .flat_map(|r| r.sample.turns.iter().map(|t| t.instruction.as_str())),
                cfg.theta,
            )?,
        };
        templates.system_templates = chat.system_templates();
        let vocab = build_vocab(&chat, &[&train_records, &test_records, &pretrain_records], cfg.vocab_max)?;
        let pre = Preprocessor { chat, templates, vocab };
        Ok(Self {
            seed,
            train: pre.prepare(&train_records)?,
            test: pre.prepare(&test_records)?,
            pretrain: pre.prepare(&pretrain_records)?,
            pre,
            train_records,
            test_records,
            pretrain_records,
        })
    }

    pub fn model_config(&self, cfg: &BenchmarkConfig) -> MllmConfig {
        MllmConfig {
            vocab_size: self.pre.vocab.len(),
            feature_dim: SynthImage::feature_dim(3),
            seed: self.seed,
            ..cfg.model.clone()
        }
    }

    /// Fresh model after connector pretraining.
    pub fn pretrained_model(&self, cfg: &BenchmarkConfig) -> Result<(TinyMLLM, TrainLog)> {
        let mut model = TinyMLLM::new(self.model_config(cfg))?;
        let tc = TrainConfig {
            seed: self.seed,
            ..cfg.pretrain.clone()
        };
        let log = pretrain(&mut model, &self.pretrain, &tc)?;
        Ok((model, log))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: MaskMode,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_response_nll: f64,
    pub train_response_nll: f64,
    pub test_vc: f64,
    pub test_vc_per_token: f64,
    pub test_attn_visual: f64,
    pub skipped_empty_mask: usize,
}

pub struct Cell {
    pub model: TinyMLLM,
    pub result: CellResult,
    pub log: TrainLog,
    pub test_metrics: Vec<SampleMetrics>,
}

/// Fine-tunes a copy of `pretrained` under `mode` and evaluates it.
pub fn run_cell(
    bench: &Benchmark,
    pretrained: &TinyMLLM,
    cfg: &BenchmarkConfig,
    mode: MaskMode,
    train: Option<&[PreparedSample]>,
) -> Result<Cell> {
    let mut model = pretrained.clone();
    let tc = TrainConfig {
        mask_mode: mode,
        seed: bench.seed,
        ..cfg.finetune.clone()
    };
    let log = finetune(&mut model, train.unwrap_or(&bench.train), &tc)?;
    let (result, test_metrics) = evaluate_cell(bench, &model, cfg, mode, log.skipped_empty_mask)?;
    Ok(Cell {
        model,
        result,
        log,
        test_metrics,
    })
}

pub fn evaluate_cell(
    bench: &Benchmark,
    model: &TinyMLLM,
    cfg: &BenchmarkConfig,
    mode: MaskMode,
    skipped: usize,
) -> Result<(CellResult, Vec<SampleMetrics>)> {
    let test_metrics = evaluate(model, &bench.test, &cfg.eval)?;
    let agg = aggregate(&test_metrics);
    let n_train = cfg.train_eval_n.min(bench.train.len());
    let train_nll = metrics::mean_response_nll(model, &bench.train[..n_train])?;
    let acc = answer_accuracy(model, &bench.test, &bench.pre, cfg.answer_max_new)?;
    Ok((
        CellResult {
            mode,
            seed: bench.seed,
            test_accuracy: acc,
            test_response_nll: agg.mean_response_nll,
            train_response_nll: train_nll,
            test_vc: agg.mean_vc,
            test_vc_per_token: agg.mean_vc_per_token,
            test_attn_visual: agg.mean_attn_visual,
            skipped_empty_mask: skipped,
        },
        test_metrics,
    ))
}

/// SHA-256 over every parameter name and value.
pub fn model_digest(model: &TinyMLLM) -> String {
    let mut h = Sha256::new();
    for p in model.params() {
        h.update(p.name.as_bytes());
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the JSON form of per-sample metrics and the cell result.
pub fn metrics_digest(result: &CellResult, samples: &[SampleMetrics]) -> String {
    let json = serde_json::to_vec(&(result, samples)).expect("metrics serialize");
    hex::encode(Sha256::digest(json))
}

/// Average ranks (1 = best) of `values`, higher is better; ties share the
/// mean of their ranks.
pub fn ranks_desc(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (i, &v) in values.iter().enumerate() {
        let better = values.iter().filter(|&&w| w > v).count();
        let equal = values.iter().filter(|&&w| w == v).count();
        out[i] = better as f64 + (equal as f64 + 1.0) / 2.0;
    }
    out
}
