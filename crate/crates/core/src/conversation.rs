//! Chat serialization with per-token roles, and the supervision masks that
//! separate response-only training from instruction+response training.
//!
//! Layout of a serialized sample (one block per turn, image only in turn 1):
//!
//! ```text
//! <bos> SYS.. | user : <image>xN instruction.. | assistant : response.. <eos> | user : ...
//! FMT   SYS     FMT FMT IMG       TASK/INSTR     FMT       FMT RESP       RESP
//! ```
//!
//! Masks live on *target* positions: position `t` is supervised when the
//! token at `t + 1` has a role the mask mode permits.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::templates::{split_sentences, TemplateSet};
use crate::tokenizer::{Vocab, BOS, EOS, IMAGE};

pub const IMAGE_MARKER: &str = "{image}";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConversationError {
    #[error("chat template user tag has no {IMAGE_MARKER} placeholder")]
    UnknownPlaceholder,
    #[error("sample {0} has no turns or an empty instruction/response")]
    InvalidSample(String),
    #[error("mask mode {0} supervises no position of this sample")]
    EmptyMask(MaskMode),
    #[error("unknown mask mode {0:?}")]
    UnknownMode(String),
    #[error("dataset line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    Caption,
    Choice,
    Referring,
    Presence,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Qa,
        TaskKind::Caption,
        TaskKind::Choice,
        TaskKind::Referring,
        TaskKind::Presence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::Caption => "caption",
            TaskKind::Choice => "choice",
            TaskKind::Referring => "referring",
            TaskKind::Presence => "presence",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown task kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub instruction: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub image_id: String,
    pub turns: Vec<Turn>,
    pub task_kind: TaskKind,
}

impl ConversationSample {
    pub fn validate(&self) -> Result<(), ConversationError> {
        let bad = self.turns.is_empty()
            || self
                .turns
                .iter()
                .any(|t| t.instruction.trim().is_empty() || t.response.trim().is_empty());
        if bad {
            Err(ConversationError::InvalidSample(self.image_id.clone()))
        } else {
            Ok(())
        }
    }
}

/// One line of a dataset JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    #[serde(flatten)]
    pub sample: ConversationSample,
    /// Image feature vector fed to the frozen encoder.
    pub image: Vec<f64>,
    pub gt_objects: Vec<String>,
    /// Oracle answer for the first turn.
    #[serde(default)]
    pub answer: Option<String>,
    /// Index of the question phrasing used, when the task has phrasings.
    #[serde(default)]
    pub phrasing: Option<usize>,
}

fn schema_v1() -> u32 {
    DATASET_SCHEMA_VERSION
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>, ConversationError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|source| ConversationError::Json {
            line: i + 1,
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<(), ConversationError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| ConversationError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    SysTemplate,
    TaskTemplate,
    InstrContent,
    Format,
    ImageSlot,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    /// System preamble; may be empty.
    pub system: String,
    /// User tag; must contain [`IMAGE_MARKER`], where turn 1 puts the image.
    pub user: String,
    pub assistant: String,
    pub image_slots: usize,
}

impl ChatTemplate {
    pub fn with_slots(image_slots: usize) -> Self {
        Self {
            system: "A chat between a curious user and an artificial intelligence assistant."
                .to_string(),
            user: format!("user: {IMAGE_MARKER}"),
            assistant: "assistant:".to_string(),
            image_slots,
        }
    }

    fn user_parts(&self) -> Result<(&str, &str), ConversationError> {
        self.user
            .split_once(IMAGE_MARKER)
            .ok_or(ConversationError::UnknownPlaceholder)
    }

    /// Strings that are system templates for removal purposes.
    pub fn system_templates(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.system.trim().is_empty() {
            out.push(self.system.clone());
        }
        out.push(self.user.clone());
        out.push(self.assistant.clone());
        out
    }
}

/// Sentence spans of an instruction: maximal runs of consecutive sentences
/// that together form a known template become `TaskTemplate`, everything
/// else is `InstrContent`.
pub fn annotate_task_templates(instruction: &str, templates: &TemplateSet) -> Vec<(String, Role)> {
    let sentences = split_sentences(instruction);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sentences.len() {
        let mut matched = None;
        for j in (i + 1..=sentences.len()).rev() {
            let joined = sentences[i..j].join(" ");
            if templates.contains(&joined) {
                matched = Some((joined, j));
                break;
            }
        }
        match matched {
            Some((s, j)) => {
                out.push((s, Role::TaskTemplate));
                i = j;
            }
            None => {
                out.push((sentences[i].clone(), Role::InstrContent));
                i += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedSample {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
    pub visual_slot_count: usize,
    /// First IMAGE_SLOT position.
    pub image_start: usize,
    /// Per turn: the assistant-tag terminal token, i.e. the position right
    /// before the first response token.
    pub answer_anchors: Vec<usize>,
    pub instruction_spans: Vec<Range<usize>>,
    /// Per turn, response tokens including the closing `<eos>`.
    pub response_spans: Vec<Range<usize>>,
}

impl SerializedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets; the final position has no target.
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.ids[1..].to_vec();
        t.push(crate::tokenizer::PAD);
        t
    }

    pub fn answer_anchor_index(&self) -> Option<usize> {
        self.answer_anchors.first().copied()
    }
}

struct Builder<'v> {
    vocab: &'v Vocab,
    ids: Vec<usize>,
    roles: Vec<Role>,
}

impl Builder<'_> {
    fn text(&mut self, s: &str, role: Role) {
        for id in self.vocab.encode(s) {
            self.ids.push(id);
            self.roles.push(role);
        }
    }

    fn token(&mut self, id: usize, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }
}

/// Serializes every turn of `sample`. `templates` decides which instruction
/// sentences are task templates.
pub fn serialize(
    sample: &ConversationSample,
    chat: &ChatTemplate,
    templates: &TemplateSet,
    vocab: &Vocab,
) -> Result<SerializedSample, ConversationError> {
    sample.validate()?;
    let (user_pre, user_post) = chat.user_parts()?;
    let mut b = Builder {
        vocab,
        ids: Vec::new(),
        roles: Vec::new(),
    };
    b.token(BOS, Role::Format);
    b.text(&chat.system, Role::SysTemplate);
    let mut image_start = 0;
    let mut anchors = Vec::new();
    let mut instr_spans = Vec::new();
    let mut resp_spans = Vec::new();
    for (ti, turn) in sample.turns.iter().enumerate() {
        b.text(user_pre, Role::Format);
        if ti == 0 {
            image_start = b.ids.len();
            for _ in 0..chat.image_slots {
                b.token(IMAGE, Role::ImageSlot);
            }
        }
        b.text(user_post, Role::Format);
        let istart = b.ids.len();
        for (span, role) in annotate_task_templates(&turn.instruction, templates) {
            b.text(&span, role);
        }
        instr_spans.push(istart..b.ids.len());
        b.text(&chat.assistant, Role::Format);
        anchors.push(b.ids.len() - 1);
        let rstart = b.ids.len();
        b.text(&turn.response, Role::Response);
        b.token(EOS, Role::Response);
        resp_spans.push(rstart..b.ids.len());
    }
    Ok(SerializedSample {
        ids: b.ids,
        roles: b.roles,
        visual_slot_count: chat.image_slots,
        image_start,
        answer_anchors: anchors,
        instruction_spans: instr_spans,
        response_spans: resp_spans,
    })
}

/// Prompt for image-only generation: everything up to and including the
/// image slots of turn 1 (and any user-tag text after the marker).
pub fn image_prompt(chat: &ChatTemplate, vocab: &Vocab) -> Result<(Vec<usize>, usize), ConversationError> {
    let (user_pre, user_post) = chat.user_parts()?;
    let mut b = Builder {
        vocab,
        ids: Vec::new(),
        roles: Vec::new(),
    };
    b.token(BOS, Role::Format);
    b.text(&chat.system, Role::SysTemplate);
    b.text(user_pre, Role::Format);
    let start = b.ids.len();
    for _ in 0..chat.image_slots {
        b.token(IMAGE, Role::ImageSlot);
    }
    b.text(user_post, Role::Format);
    Ok((b.ids, start))
}

/// Serialized prefix of a single-turn sample, ending with the assistant tag;
/// what a model is given at answer time.
pub fn answer_prompt(serialized: &SerializedSample) -> &[usize] {
    let anchor = serialized.answer_anchors[0];
    &serialized.ids[..=anchor]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Vit,
    L2tFull,
    L2tNoSys,
    L2t,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [MaskMode::Vit, MaskMode::L2tFull, MaskMode::L2tNoSys, MaskMode::L2t];

    pub fn permits(self, role: Role) -> bool {
        use Role::*;
        match self {
            MaskMode::Vit => matches!(role, Response),
            MaskMode::L2tFull => !matches!(role, ImageSlot),
            MaskMode::L2tNoSys => matches!(role, TaskTemplate | InstrContent | Response),
            MaskMode::L2t => matches!(role, InstrContent | Response),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Vit => "vit",
            MaskMode::L2tFull => "l2t_full",
            MaskMode::L2tNoSys => "l2t_no_sys",
            MaskMode::L2t => "l2t",
        }
    }

    pub fn supervises_instructions(self) -> bool {
        self != MaskMode::Vit
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = ConversationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ConversationError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub supervised: Vec<bool>,
    pub mode: MaskMode,
}

impl LossMask {
    pub fn count(&self) -> usize {
        self.supervised.iter().filter(|&&s| s).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.supervised.len()).filter(|&i| self.supervised[i]).collect()
    }

    /// Supervised positions grouped by the role of their target token.
    pub fn role_counts(&self, s: &SerializedSample) -> RoleCounts {
        let mut c = RoleCounts::default();
        for t in self.positions() {
            match s.roles[t + 1] {
                Role::Response => c.response += 1,
                Role::InstrContent => c.instruction += 1,
                _ => c.template += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RoleCounts {
    pub response: usize,
    pub instruction: usize,
    /// System, task-template and format targets.
    pub template: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.response + self.instruction + self.template
    }

    pub fn add(&mut self, o: RoleCounts) {
        self.response += o.response;
        self.instruction += o.instruction;
        self.template += o.template;
    }
}

/// Like [`build_loss_mask`] but never fails; an all-false mask is possible.
pub fn loss_mask_unchecked(s: &SerializedSample, mode: MaskMode) -> LossMask {
    let n = s.ids.len();
    let supervised = (0..n)
        .map(|t| t + 1 < n && mode.permits(s.roles[t + 1]))
        .collect();
    LossMask { supervised, mode }
}

pub fn build_loss_mask(s: &SerializedSample, mode: MaskMode) -> Result<LossMask, ConversationError> {
    let m = loss_mask_unchecked(s, mode);
    if m.count() == 0 {
        return Err(ConversationError::EmptyMask(mode));
    }
    Ok(m)
}

/// Mask restricted to positions whose target is a response token.
pub fn response_mask(s: &SerializedSample) -> LossMask {
    loss_mask_unchecked(s, MaskMode::Vit)
}
