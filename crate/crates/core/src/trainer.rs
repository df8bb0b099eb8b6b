//! Two-stage optimization: connector-only pretraining under the response-only
//! mask, then end-to-end fine-tuning under a chosen mask mode.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{
    image_prompt, loss_mask_unchecked, serialize, ChatTemplate, ConversationError, ConversationSample,
    MaskMode, Record, Role, RoleCounts, SerializedSample, TaskKind, Turn, DATASET_SCHEMA_VERSION,
};
use crate::model::{generate, generate_greedy_batch, GenerateConfig, Input, ModelError, ParamGroup, Strategy, TinyMLLM, Visual};
use crate::synthworld::{parse_query, Query};
use crate::templates::TemplateSet;
use crate::tensor::{Graph, Reduction, Tensor, TensorError};
use crate::tokenizer::{Vocab, TokenizerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    DataEmpty,
    #[error("config is for stage {0:?}")]
    WrongStage(Stage),
    #[error("model has not been pretrained; set from_scratch to fine-tune anyway")]
    NotPretrained,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("parameter/gradient shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero.
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mask_mode: MaskMode,
    pub lr_peak: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub reduction: Reduction,
    /// Relative weight of non-response supervised tokens.
    pub instr_weight: f64,
    pub seed: u64,
    /// Fine-tune a model that never went through pretraining.
    pub from_scratch: bool,
    /// Held-out evaluation every this many steps; `0` disables.
    pub eval_every: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::Finetune)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: both stages at lr 1e-3.
    pub fn desk(stage: Stage) -> Self {
        Self {
            stage,
            mask_mode: MaskMode::Vit,
            lr_peak: 1e-3,
            warmup_ratio: 0.03,
            schedule: Schedule::WarmupCosine,
            batch_size: match stage {
                Stage::Pretrain => 8,
                Stage::Finetune => 8,
            },
            epochs: 1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            reduction: Reduction::TokenMean,
            instr_weight: 1.0,
            seed: 0,
            from_scratch: false,
            eval_every: 0,
            train_data: None,
            eval_data: None,
        }
    }

    /// Learning rates and batch sizes of the usual 7B-scale recipe.
    pub fn full_scale(stage: Stage) -> Self {
        let (lr_peak, batch_size) = match stage {
            Stage::Pretrain => (1e-3, 256),
            Stage::Finetune => (2e-5, 128),
        };
        Self {
            lr_peak,
            batch_size,
            ..Self::desk(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return bad("warmup_ratio must lie in (0, 1)");
        }
        if !(self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.grad_clip < 0.0 || self.instr_weight < 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip, instr_weight and weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_ratio * total_steps`, then cosine to zero.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps as f64;
    let s = (step as f64).min(total);
    let warm = cfg.warmup_ratio * total;
    if s < warm {
        cfg.lr_peak * s / warm
    } else if total <= warm {
        cfg.lr_peak
    } else {
        let progress = (s - warm) / (total - warm);
        0.5 * cfg.lr_peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay.
pub fn adamw_step(param: &mut [f64], grad: &[f64], hp: &AdamHyper, state: &mut AdamState) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(TrainError::ShapeMismatch(param.len(), grad.len()));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] -= hp.lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * param[i]);
    }
    Ok(())
}

/// Chat format, template set and vocabulary: everything needed to turn
/// records into token sequences.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub chat: ChatTemplate,
    pub templates: TemplateSet,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub task_kind: TaskKind,
    pub ser: SerializedSample,
    /// Empty for text-only samples.
    pub image: Vec<f64>,
    pub answer: Option<String>,
    pub gt_objects: Vec<String>,
}

impl PreparedSample {
    pub fn visual(&self) -> Option<Visual<'_>> {
        (!self.image.is_empty()).then_some(Visual::Feature(&self.image))
    }

    pub fn input(&self) -> Input<'_> {
        Input {
            visual: self.visual(),
            ids: &self.ser.ids,
        }
    }
}

impl Preprocessor {
    pub fn prepare_one(&self, r: &Record) -> Result<PreparedSample> {
        Ok(PreparedSample {
            id: r.sample.image_id.clone(),
            task_kind: r.sample.task_kind,
            ser: serialize(&r.sample, &self.chat, &self.templates, &self.vocab)?,
            image: r.image.clone(),
            answer: r.answer.clone(),
            gt_objects: r.gt_objects.clone(),
        })
    }

    pub fn prepare(&self, records: &[Record]) -> Result<Vec<PreparedSample>> {
        records.iter().map(|r| self.prepare_one(r)).collect()
    }

    /// Token ids of the assistant tag.
    pub fn assistant_tag(&self) -> Vec<usize> {
        self.vocab.encode(&self.chat.assistant)
    }
}

/// Vocabulary over the chat strings and every instruction and response.
pub fn build_vocab(chat: &ChatTemplate, records: &[&[Record]], max_size: usize) -> Result<Vocab> {
    let mut texts: Vec<&str> = vec![&chat.system, &chat.user, &chat.assistant];
    for set in records {
        for r in set.iter() {
            for t in &r.sample.turns {
                texts.push(&t.instruction);
                texts.push(&t.response);
            }
        }
    }
    Ok(Vocab::build(texts, max_size)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean NLL over response targets only, whatever the mask mode.
    pub loss_vit_component: f64,
    pub tokens_resp: usize,
    pub tokens_instr: usize,
    pub tokens_template: usize,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub heldout_response_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub eval: Vec<EvalRow>,
    /// Samples dropped because the mask mode supervises none of their
    /// positions.
    pub skipped_empty_mask: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimizer state plus schedule position; drives single steps.
pub struct Trainer {
    cfg: TrainConfig,
    mode: MaskMode,
    states: Vec<Option<AdamState>>,
    step: usize,
    total_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss: f64,
    pub loss_vit_component: f64,
    pub counts: RoleCounts,
}

impl Trainer {
    pub fn new(model: &TinyMLLM, cfg: &TrainConfig, mode: MaskMode, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            states: model
                .params()
                .iter()
                .map(|p| model.is_trainable(p.group).then(|| AdamState::new(p.value.numel())))
                .collect(),
            step: 0,
            total_steps: total_steps.max(1),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Forward, backward and one AdamW update on `batch`.
    pub fn step(&mut self, model: &mut TinyMLLM, batch: &[&PreparedSample]) -> Result<StepStats> {
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut resp_rows = Vec::new();
        let mut counts = RoleCounts::default();
        for s in batch {
            let mask = loss_mask_unchecked(&s.ser, self.mode);
            counts.add(mask.role_counts(&s.ser));
            let base = targets.len();
            targets.extend(s.ser.targets());
            for (t, &on) in mask.supervised.iter().enumerate() {
                let resp = t + 1 < s.ser.len() && s.ser.roles[t + 1] == Role::Response;
                if resp {
                    resp_rows.push(base + t);
                }
                weights.push(match (on, resp) {
                    (false, _) => 0.0,
                    (true, true) => 1.0,
                    (true, false) => self.cfg.instr_weight,
                });
            }
        }
        let total = counts.total();
        if total == 0 {
            return Err(TensorError::EmptyMask.into());
        }
        if self.cfg.reduction == Reduction::TokenMean {
            for w in &mut weights {
                *w /= total as f64;
            }
        }
        let inputs: Vec<Input<'_>> = batch.iter().map(|s| s.input()).collect();
        let (loss, vit, grads) = {
            let mut g = Graph::new();
            let built = model.build(&mut g, &inputs, true)?;
            let loss = g.cross_entropy_weighted(built.logits, &targets, &weights)?;
            let vit = mean_nll_rows(g.value(built.logits), &targets, &resp_rows);
            let mut grads = g.backward(loss)?;
            let loss_value = g.value(loss).item();
            let taken: Vec<Option<Tensor>> = built
                .params
                .iter()
                .zip(&self.states)
                .map(|(&v, st)| st.as_ref().and_then(|_| grads.take(v)))
                .collect();
            (loss_value, vit, taken)
        };
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.norm_sq())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        let hp = AdamHyper {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        };
        for (i, p) in model.params_mut() {
            let (Some(state), Some(g)) = (self.states[i].as_mut(), grads[i].as_ref()) else {
                continue;
            };
            let mut gd = g.data().to_vec();
            if clip != 1.0 {
                gd.iter_mut().for_each(|x| *x *= clip);
            }
            adamw_step(p.value.data_mut(), &gd, &hp, state)?;
        }
        self.step += 1;
        Ok(StepStats {
            lr,
            loss,
            loss_vit_component: vit,
            counts,
        })
    }
}

fn mean_nll_rows(logits: &Tensor, targets: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let total: f64 = rows.iter().map(|&r| row_nll(logits.row(r), targets[r])).sum();
    total / rows.len() as f64
}

pub(crate) fn row_nll(row: &[f64], y: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[y]
}

/// Runs one stage over `data` with the groups in `trainable` unfrozen.
fn run_stage(
    model: &mut TinyMLLM,
    data: &[PreparedSample],
    eval: Option<&[PreparedSample]>,
    cfg: &TrainConfig,
    mode: MaskMode,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::DataEmpty);
    }
    let usable: Vec<usize> = (0..data.len())
        .filter(|&i| loss_mask_unchecked(&data[i].ser, mode).count() > 0)
        .collect();
    let mut log = TrainLog {
        skipped_empty_mask: data.len() - usable.len(),
        ..TrainLog::default()
    };
    if usable.is_empty() {
        return Err(TrainError::DataEmpty);
    }
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(model, cfg, mode, total)?;
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let started = Instant::now();
            let st = trainer.step(model, &batch)?;
            log.rows.push(LogRow {
                step: trainer.steps_done() - 1,
                lr: st.lr,
                loss: st.loss,
                loss_vit_component: st.loss_vit_component,
                tokens_resp: st.counts.response,
                tokens_instr: st.counts.instruction,
                tokens_template: st.counts.template,
                ms_per_step: started.elapsed().as_secs_f64() * 1e3,
            });
            let step = trainer.steps_done();
            if let Some(ev) = eval {
                if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == total) {
                    log.eval.push(EvalRow {
                        step,
                        heldout_response_nll: crate::metrics::mean_response_nll(model, ev)?,
                    });
                }
            }
        }
    }
    Ok(log)
}

/// Trains only the connector, always with the response-only mask.
pub fn pretrain(model: &mut TinyMLLM, data: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainLog> {
    if cfg.stage != Stage::Pretrain {
        return Err(TrainError::WrongStage(cfg.stage));
    }
    let saved = model.is_trainable(ParamGroup::Decoder);
    model.set_trainable(ParamGroup::Decoder, false);
    model.set_trainable(ParamGroup::Connector, true);
    let out = run_stage(model, data, None, cfg, MaskMode::Vit);
    model.set_trainable(ParamGroup::Decoder, saved);
    let log = out?;
    model.mark_pretrained();
    Ok(log)
}

/// Trains connector and decoder under `cfg.mask_mode`.
pub fn finetune(model: &mut TinyMLLM, data: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainLog> {
    finetune_with_eval(model, data, None, cfg)
}

pub fn finetune_with_eval(
    model: &mut TinyMLLM,
    data: &[PreparedSample],
    eval: Option<&[PreparedSample]>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::WrongStage(cfg.stage));
    }
    if !model.is_pretrained() && !cfg.from_scratch {
        return Err(TrainError::NotPretrained);
    }
    model.set_trainable(ParamGroup::Connector, true);
    model.set_trainable(ParamGroup::Decoder, true);
    run_stage(model, data, eval, cfg, cfg.mask_mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfGenReport {
    pub attempted: usize,
    pub malformed: usize,
}

impl SelfGenReport {
    pub fn malformed_rate(&self) -> f64 {
        self.malformed as f64 / self.attempted.max(1) as f64
    }
}

fn find_subseq(hay: &[usize], needle: &[usize]) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    (0..=hay.len() - needle.len()).find(|&i| &hay[i..i + needle.len()] == needle)
}

fn kind_of(instruction: &str, grid_size: usize) -> TaskKind {
    match parse_query(instruction, grid_size).map(|q| q.0) {
        Some(Query::Color { .. }) | None => TaskKind::Qa,
        Some(Query::Choice { .. }) => TaskKind::Choice,
        Some(Query::Presence { .. }) => TaskKind::Presence,
        Some(Query::Region { .. }) => TaskKind::Referring,
        Some(Query::Caption) => TaskKind::Caption,
    }
}

/// Prompts the model with the first `n` images alone and splits each
/// generation at the assistant tag into an instruction/response pair.
/// Generations without the tag, or with an empty side, are dropped and
/// counted as malformed.
pub fn self_generate(
    model: &TinyMLLM,
    images: &[Record],
    n: usize,
    pre: &Preprocessor,
    decode: &GenerateConfig,
    grid_size: usize,
) -> Result<(Vec<Record>, SelfGenReport)> {
    let (prompt, _) = image_prompt(&pre.chat, &pre.vocab)?;
    let tag = pre.assistant_tag();
    let chosen = &images[..n.min(images.len())];
    let mut generations = Vec::with_capacity(chosen.len());
    match decode.strategy {
        Strategy::Greedy => {
            for chunk in chosen.chunks(32) {
                let prompts: Vec<(Option<Visual<'_>>, &[usize])> = chunk
                    .iter()
                    .map(|r| (Some(Visual::Feature(&r.image)), &prompt[..]))
                    .collect();
                generations.extend(generate_greedy_batch(model, &prompts, decode.max_new_tokens)?);
            }
        }
        Strategy::Beam => {
            for r in chosen {
                generations.push(generate(model, Some(Visual::Feature(&r.image)), &prompt, decode)?);
            }
        }
    }
    let mut out = Vec::new();
    let mut malformed = 0;
    for (r, gen) in chosen.iter().zip(generations) {
        let Some(at) = find_subseq(&gen, &tag) else {
            malformed += 1;
            continue;
        };
        let instruction = pre.vocab.decode(&gen[..at])?;
        let response = pre.vocab.decode(&gen[at + tag.len()..])?;
        if instruction.trim().is_empty() || response.trim().is_empty() {
            malformed += 1;
            continue;
        }
        out.push(Record {
            schema_version: DATASET_SCHEMA_VERSION,
            sample: ConversationSample {
                image_id: format!("gen-{}", r.sample.image_id),
                task_kind: kind_of(&instruction, grid_size),
                turns: vec![Turn { instruction, response }],
            },
            image: r.image.clone(),
            gt_objects: r.gt_objects.clone(),
            answer: None,
            phrasing: None,
        });
    }
    Ok((
        out,
        SelfGenReport {
            attempted: chosen.len(),
            malformed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::desk(Stage::Finetune);
        let total = 1000;
        assert!((lr_at(30, total, &cfg) - cfg.lr_peak).abs() < 1e-15);
        assert!(lr_at(total, total, &cfg).abs() < 1e-18);
        let mid = 30 + (total - 30) / 2;
        assert!((lr_at(mid, total, &cfg) - cfg.lr_peak / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(0, total, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk(Stage::Finetune);
        c.warmup_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(Stage::Finetune);
        c.lr_peak = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::full_scale(Stage::Finetune).lr_peak, 2e-5);
    }

    #[test]
    fn subsequence_search() {
        assert_eq!(find_subseq(&[1, 2, 3, 4], &[3, 4]), Some(2));
        assert_eq!(find_subseq(&[1, 2], &[2, 3]), None);
        assert_eq!(find_subseq(&[], &[1]), None);
    }
}
