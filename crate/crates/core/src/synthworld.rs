//! Synthetic grid-world images and instruction data with a controllable
//! language-prior shortcut.
//!
//! An image is a `G×G` grid; each cell is empty or holds an object with a
//! color and a size. The feature vector concatenates, per cell in row-major
//! order, one-hot object ⊕ one-hot color ⊕ `[small, big, empty]`, so the grid
//! is exactly recoverable from it.
//!
//! With probability `leak_prob` a record leaks its answer through the
//! instruction text: either the question phrasing index equals the answer
//! index (`Phrasing`), or the queried object's color is forced to a fixed
//! per-object prior color (`AnswerPrior`).

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{ConversationSample, Record, TaskKind, Turn, DATASET_SCHEMA_VERSION};
use crate::templates::normalize_sentence;

pub const OBJECTS: [&str; 30] = [
    "ball", "cup", "box", "car", "tree", "dog", "cat", "bird", "fish", "hat", "shoe", "book", "lamp",
    "chair", "table", "clock", "key", "phone", "bag", "bottle", "apple", "banana", "cake", "kite",
    "boat", "bus", "bike", "star", "moon", "flower",
];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"];
pub const SIZES: [&str; 2] = ["small", "big"];

/// Per-cell feature width: objects, colors, and the size/empty slots.
pub const CELL_DIM: usize = OBJECTS.len() + COLORS.len() + 3;

pub const QA_TEMPLATE: &str = "Answer the question using a single word or phrase.";
pub const CHOICE_TEMPLATE: &str = "Answer with the option's letter from the given choices directly.";
pub const REGION_TEMPLATE: &str = "Please provide a short description for this region:";

pub const COLOR_PHRASINGS: [&str; 8] = [
    "What color is the {}?",
    "Which color is the {}?",
    "What is the color of the {}?",
    "Tell me the color of the {}.",
    "Name the color of the {}.",
    "What colour is the {}?",
    "Which color does the {} have?",
    "Can you tell the color of the {}?",
];
pub const PRESENCE_PHRASINGS: [&str; 2] = ["Is there a {} in the image?", "Does the image contain a {}?"];
pub const CAPTION_PROMPTS: [&str; 3] = [
    "Describe the image briefly.",
    "Provide a one-sentence caption for the provided image.",
    "Summarize the visual content of the image.",
];
/// Pretraining instructions; they say nothing about the image.
pub const PRETRAIN_PROMPTS: [&str; 5] = [
    "Give a brief description of the image.",
    "Write a short caption for the picture.",
    "Describe the picture concisely.",
    "Render a clear and concise summary of the photo.",
    "Share a concise interpretation of the image provided.",
];
const OPTION_LETTERS: [&str; 3] = ["a", "b", "c"];

pub const UNANSWERABLE: &str = "unanswerable";

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("query cannot be answered from this image")]
    Unanswerable,
    #[error("feature vector of length {got} does not encode a {grid}x{grid} grid")]
    BadFeature { got: usize, grid: usize },
    #[error("task mix weights must be non-negative and sum to 1, got {0}")]
    BadMix(f64),
    #[error("bad task mix entry {0:?}")]
    BadMixEntry(String),
    #[error("image has no objects")]
    EmptyImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub object: usize,
    pub color: usize,
    pub size: usize,
}

impl Cell {
    pub fn describe(&self) -> String {
        format!("{} {} {}", SIZES[self.size], COLORS[self.color], OBJECTS[self.object])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthImage {
    pub grid_size: usize,
    pub cells: Vec<Option<Cell>>,
}

pub fn region_name(grid_size: usize, idx: usize) -> String {
    let (r, c) = (idx / grid_size, idx % grid_size);
    if grid_size == 3 {
        const ROWS: [&str; 3] = ["top", "middle", "bottom"];
        const COLS: [&str; 3] = ["left", "middle", "right"];
        if r == 1 && c == 1 {
            return "center".into();
        }
        format!("{} {}", ROWS[r], COLS[c])
    } else {
        format!("row {} column {}", r + 1, c + 1)
    }
}

impl SynthImage {
    pub fn feature_dim(grid_size: usize) -> usize {
        grid_size * grid_size * CELL_DIM
    }

    pub fn feature(&self) -> Vec<f64> {
        let mut f = vec![0.0; Self::feature_dim(self.grid_size)];
        for (i, cell) in self.cells.iter().enumerate() {
            let base = i * CELL_DIM;
            match cell {
                Some(c) => {
                    f[base + c.object] = 1.0;
                    f[base + OBJECTS.len() + c.color] = 1.0;
                    f[base + OBJECTS.len() + COLORS.len() + c.size] = 1.0;
                }
                None => f[base + CELL_DIM - 1] = 1.0,
            }
        }
        f
    }

    pub fn from_feature(feature: &[f64], grid_size: usize) -> Result<Self, SynthError> {
        let bad = || SynthError::BadFeature {
            got: feature.len(),
            grid: grid_size,
        };
        if feature.len() != Self::feature_dim(grid_size) {
            return Err(bad());
        }
        let argmax = |s: &[f64]| s.iter().position(|&v| v == 1.0);
        let mut cells = Vec::with_capacity(grid_size * grid_size);
        for chunk in feature.chunks(CELL_DIM) {
            let (obj, rest) = chunk.split_at(OBJECTS.len());
            let (col, size) = rest.split_at(COLORS.len());
            if size[2] == 1.0 {
                cells.push(None);
            } else {
                cells.push(Some(Cell {
                    object: argmax(obj).ok_or_else(bad)?,
                    color: argmax(col).ok_or_else(bad)?,
                    size: argmax(&size[..2]).ok_or_else(bad)?,
                }));
            }
        }
        Ok(Self { grid_size, cells })
    }

    pub fn find(&self, object: usize) -> Option<(usize, Cell)> {
        self.cells
            .iter()
            .enumerate()
            .find_map(|(i, c)| c.filter(|c| c.object == object).map(|c| (i, c)))
    }

    /// Object words present, in row-major order.
    pub fn objects(&self) -> Vec<String> {
        self.cells
            .iter()
            .flatten()
            .map(|c| OBJECTS[c.object].to_string())
            .collect()
    }

    /// All occupied cells in row-major order.
    pub fn caption(&self) -> String {
        let parts: Vec<String> = self.cells.iter().flatten().map(Cell::describe).collect();
        format!("{}.", parts.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    Color { object: usize },
    Presence { object: usize },
    Region { cell: usize },
    Caption,
    /// Color question answered with an option letter.
    Choice { object: usize, options: Vec<usize> },
}

pub fn oracle_answer(image: &SynthImage, query: &Query) -> Result<String, SynthError> {
    match query {
        Query::Color { object } => image
            .find(*object)
            .map(|(_, c)| COLORS[c.color].to_string())
            .ok_or(SynthError::Unanswerable),
        Query::Presence { object } => Ok(if image.find(*object).is_some() { "yes" } else { "no" }.into()),
        Query::Region { cell } => image
            .cells
            .get(*cell)
            .copied()
            .flatten()
            .map(|c| c.describe())
            .ok_or(SynthError::Unanswerable),
        Query::Caption => {
            if image.cells.iter().all(Option::is_none) {
                Err(SynthError::EmptyImage)
            } else {
                Ok(image.caption())
            }
        }
        Query::Choice { object, options } => {
            let (_, c) = image.find(*object).ok_or(SynthError::Unanswerable)?;
            options
                .iter()
                .position(|&o| o == c.color)
                .map(|i| OPTION_LETTERS[i].to_string())
                .ok_or(SynthError::Unanswerable)
        }
    }
}

/// Oracle answer, with `"unanswerable"` standing in for unanswerable queries.
pub fn answer_or_unanswerable(image: &SynthImage, query: &Query) -> String {
    oracle_answer(image, query).unwrap_or_else(|_| UNANSWERABLE.to_string())
}

fn fill(template: &str, word: &str) -> String {
    template.replacen("{}", word, 1)
}

fn options_text(options: &[usize]) -> String {
    let parts: Vec<String> = options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(&o, l)| format!("({l}) {}", COLORS[o]))
        .collect();
    format!("Options: {}.", parts.join(", "))
}

/// Recovers the structured query from an instruction produced by this
/// module. Matching is on normalized sentences, case-insensitively.
pub fn parse_query(instruction: &str, grid_size: usize) -> Option<(Query, Option<usize>)> {
    let lower = normalize_sentence(instruction).to_lowercase();
    let sentences = crate::templates::split_sentences(&lower);
    let first = sentences.first()?;
    let match_phrasing = |phrasings: &[&str]| {
        for (pi, p) in phrasings.iter().enumerate() {
            let p = p.to_lowercase();
            let (pre, post) = p.split_once("{}")?;
            if let Some(mid) = first.strip_prefix(pre).and_then(|r| r.strip_suffix(post)) {
                if let Some(o) = OBJECTS.iter().position(|&w| w == mid) {
                    return Some((pi, o));
                }
            }
        }
        None
    };
    if let Some((pi, object)) = match_phrasing(&COLOR_PHRASINGS) {
        if let Some(opts) = sentences.iter().position(|s| s == "options:") {
            let spec = sentences.get(opts + 1)?;
            let mut options = Vec::new();
            for l in OPTION_LETTERS {
                let tag = format!("({l}) ");
                let start = spec.find(&tag)? + tag.len();
                let word: String = spec[start..].chars().take_while(|c| c.is_alphabetic()).collect();
                options.push(COLORS.iter().position(|&c| c == word)?);
            }
            return Some((Query::Choice { object, options }, Some(pi)));
        }
        return Some((Query::Color { object }, Some(pi)));
    }
    if let Some((pi, object)) = match_phrasing(&PRESENCE_PHRASINGS) {
        return Some((Query::Presence { object }, Some(pi)));
    }
    if lower.starts_with(&REGION_TEMPLATE.to_lowercase()) {
        let rest = sentences.get(1)?.trim_end_matches('.');
        let cell = (0..grid_size * grid_size).find(|&i| region_name(grid_size, i) == rest)?;
        return Some((Query::Region { cell }, None));
    }
    if CAPTION_PROMPTS
        .iter()
        .chain(PRETRAIN_PROMPTS.iter())
        .any(|p| p.to_lowercase() == *first)
    {
        return Some((Query::Caption, None));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LeakChannel {
    #[default]
    Phrasing,
    AnswerPrior,
}

impl FromStr for LeakChannel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "phrasing" => Ok(Self::Phrasing),
            "answer_prior" => Ok(Self::AnswerPrior),
            _ => Err(format!("unknown leak channel {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShortcutConfig {
    pub leak_prob: f64,
    pub leak_channel: LeakChannel,
}

impl Default for ShortcutConfig {
    fn default() -> Self {
        Self {
            leak_prob: 0.0,
            leak_channel: LeakChannel::Phrasing,
        }
    }
}

/// The color an object takes when the answer-prior channel leaks.
pub fn prior_color(object: usize) -> usize {
    object % COLORS.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub BTreeMap<TaskKind, f64>);

impl Default for TaskMix {
    fn default() -> Self {
        Self(BTreeMap::from([
            (TaskKind::Qa, 0.4),
            (TaskKind::Choice, 0.15),
            (TaskKind::Presence, 0.15),
            (TaskKind::Referring, 0.15),
            (TaskKind::Caption, 0.15),
        ]))
    }
}

impl TaskMix {
    pub fn only(kind: TaskKind) -> Self {
        Self(BTreeMap::from([(kind, 1.0)]))
    }

    /// `dominant` gets `1 - rest`, the others share `rest` equally.
    pub fn dominated_by(kind: TaskKind, rest: f64) -> Self {
        let others = TaskKind::ALL.len() - 1;
        Self(
            TaskKind::ALL
                .iter()
                .map(|&k| (k, if k == kind { 1.0 - rest } else { rest / others as f64 }))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let total: f64 = self.0.values().sum();
        if self.0.values().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(SynthError::BadMix(total));
        }
        Ok(())
    }
}

impl FromStr for TaskMix {
    type Err = SynthError;
    /// `qa=0.4,caption=0.6`
    fn from_str(s: &str) -> Result<Self, SynthError> {
        let mut m = BTreeMap::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SynthError::BadMixEntry(part.into()))?;
            let kind: TaskKind = k.trim().parse().map_err(|_| SynthError::BadMixEntry(part.into()))?;
            let w: f64 = v.trim().parse().map_err(|_| SynthError::BadMixEntry(part.into()))?;
            m.insert(kind, w);
        }
        let mix = TaskMix(m);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub mix: TaskMix,
    pub shortcut: ShortcutConfig,
    pub seed: u64,
    /// Fraction of records that go to the training split.
    pub split: f64,
    pub grid_size: usize,
    pub max_objects: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            mix: TaskMix::default(),
            shortcut: ShortcutConfig::default(),
            seed: 0,
            split: 0.9,
            grid_size: 3,
            max_objects: 4,
        }
    }
}

fn record_rng(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index as u64);
    rng
}

pub fn random_image(rng: &mut impl Rng, grid_size: usize, max_objects: usize) -> SynthImage {
    let cells_n = grid_size * grid_size;
    let k = rng.gen_range(1..=max_objects.clamp(1, cells_n));
    let objects: Vec<usize> = rand::seq::index::sample(rng, OBJECTS.len(), k).into_vec();
    let positions: Vec<usize> = rand::seq::index::sample(rng, cells_n, k).into_vec();
    let mut cells = vec![None; cells_n];
    for (o, p) in objects.into_iter().zip(positions) {
        cells[p] = Some(Cell {
            object: o,
            color: rng.gen_range(0..COLORS.len()),
            size: rng.gen_range(0..SIZES.len()),
        });
    }
    SynthImage { grid_size, cells }
}

fn leaked_phrasing(rng: &mut impl Rng, cfg: &ShortcutConfig, answer: usize, n_phrasings: usize) -> usize {
    if cfg.leak_channel == LeakChannel::Phrasing && rng.gen_bool(cfg.leak_prob) {
        answer
    } else {
        rng.gen_range(0..n_phrasings)
    }
}

/// Picks a present object and, under the answer-prior channel, may recolor
/// it to its prior color.
fn color_target(rng: &mut impl Rng, image: &mut SynthImage, cfg: &ShortcutConfig) -> usize {
    let occupied: Vec<usize> = (0..image.cells.len()).filter(|&i| image.cells[i].is_some()).collect();
    let idx = *occupied.choose(rng).expect("image has at least one object");
    let cell = image.cells[idx].as_mut().expect("occupied");
    if cfg.leak_channel == LeakChannel::AnswerPrior && rng.gen_bool(cfg.leak_prob) {
        cell.color = prior_color(cell.object);
    }
    cell.object
}

/// Generates record `index` of a dataset; pure in `(cfg, index)`.
pub fn gen_record(cfg: &GenConfig, index: usize) -> Record {
    let mut rng = record_rng(cfg.seed, 0x6461_7461, index);
    let kinds: Vec<(TaskKind, f64)> = cfg.mix.0.iter().map(|(k, w)| (*k, *w)).collect();
    let dist = WeightedIndex::new(kinds.iter().map(|k| k.1)).expect("validated mix");
    let kind = kinds[dist.sample(&mut rng)].0;
    let mut image = random_image(&mut rng, cfg.grid_size, cfg.max_objects);
    let sc = &cfg.shortcut;
    let (instruction, query, phrasing) = match kind {
        TaskKind::Qa => {
            let object = color_target(&mut rng, &mut image, sc);
            let color = image.find(object).expect("present").1.color;
            let p = leaked_phrasing(&mut rng, sc, color, COLOR_PHRASINGS.len());
            let text = format!("{} {QA_TEMPLATE}", fill(COLOR_PHRASINGS[p], OBJECTS[object]));
            (text, Query::Color { object }, Some(p))
        }
        TaskKind::Choice => {
            let object = color_target(&mut rng, &mut image, sc);
            let color = image.find(object).expect("present").1.color;
            let mut options: Vec<usize> = (0..COLORS.len()).filter(|&c| c != color).collect();
            options.shuffle(&mut rng);
            options.truncate(OPTION_LETTERS.len() - 1);
            options.insert(rng.gen_range(0..OPTION_LETTERS.len()), color);
            let p = leaked_phrasing(&mut rng, sc, color, COLOR_PHRASINGS.len());
            let text = format!(
                "{} {} {CHOICE_TEMPLATE}",
                fill(COLOR_PHRASINGS[p], OBJECTS[object]),
                options_text(&options)
            );
            (text, Query::Choice { object, options }, Some(p))
        }
        TaskKind::Presence => {
            let present = rng.gen_bool(0.5);
            let object = if present {
                let occ: Vec<usize> = image.cells.iter().flatten().map(|c| c.object).collect();
                *occ.choose(&mut rng).expect("non-empty")
            } else {
                let absent: Vec<usize> = (0..OBJECTS.len()).filter(|&o| image.find(o).is_none()).collect();
                *absent.choose(&mut rng).expect("grid smaller than object list")
            };
            let p = leaked_phrasing(&mut rng, sc, usize::from(!present), PRESENCE_PHRASINGS.len());
            let text = format!("{} {QA_TEMPLATE}", fill(PRESENCE_PHRASINGS[p], OBJECTS[object]));
            (text, Query::Presence { object }, Some(p))
        }
        TaskKind::Referring => {
            let occupied: Vec<usize> = (0..image.cells.len()).filter(|&i| image.cells[i].is_some()).collect();
            let cell = *occupied.choose(&mut rng).expect("non-empty");
            let text = format!("{REGION_TEMPLATE} {}.", region_name(cfg.grid_size, cell));
            (text, Query::Region { cell }, None)
        }
        TaskKind::Caption => {
            let p = rng.gen_range(0..CAPTION_PROMPTS.len());
            (CAPTION_PROMPTS[p].to_string(), Query::Caption, None)
        }
    };
    let answer = oracle_answer(&image, &query).expect("generated queries are answerable");
    make_record(format!("s{}-{index:06}", cfg.seed), &image, kind, instruction, answer, phrasing)
}

fn make_record(
    image_id: String,
    image: &SynthImage,
    kind: TaskKind,
    instruction: String,
    answer: String,
    phrasing: Option<usize>,
) -> Record {
    Record {
        schema_version: DATASET_SCHEMA_VERSION,
        sample: ConversationSample {
            image_id,
            turns: vec![Turn {
                instruction,
                response: answer.clone(),
            }],
            task_kind: kind,
        },
        image: image.feature(),
        gt_objects: image.objects(),
        answer: Some(answer),
        phrasing,
    }
}

/// `(train, held_out)`; the first `round(n * split)` records train.
pub fn gen_dataset(cfg: &GenConfig) -> Result<(Vec<Record>, Vec<Record>), SynthError> {
    cfg.mix.validate()?;
    let mut all: Vec<Record> = (0..cfg.n).map(|i| gen_record(cfg, i)).collect();
    let n_train = ((cfg.n as f64) * cfg.split).round() as usize;
    let test = all.split_off(n_train.min(cfg.n));
    Ok((all, test))
}

/// Image-caption pairs with content-free instructions for connector
/// alignment.
pub fn gen_pretrain_pairs(n: usize, seed: u64, grid_size: usize, max_objects: usize) -> Vec<Record> {
    (0..n)
        .map(|i| {
            let mut rng = record_rng(seed, 0x7072_6574, i);
            let image = random_image(&mut rng, grid_size, max_objects);
            let prompt = PRETRAIN_PROMPTS[rng.gen_range(0..PRETRAIN_PROMPTS.len())];
            make_record(
                format!("p{seed}-{i:06}"),
                &image,
                TaskKind::Caption,
                prompt.to_string(),
                image.caption(),
                None,
            )
        })
        .collect()
}

/// Accuracy of the text-only `phrasing -> most frequent answer` lookup table
/// fitted on `records` (qa records only).
pub fn phrasing_lookup_accuracy(records: &[Record]) -> f64 {
    let qa: Vec<&Record> = records
        .iter()
        .filter(|r| r.sample.task_kind == TaskKind::Qa && r.phrasing.is_some())
        .collect();
    let mut table: BTreeMap<usize, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in &qa {
        *table
            .entry(r.phrasing.unwrap())
            .or_default()
            .entry(r.sample.turns[0].response.as_str())
            .or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / qa.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball_image() -> SynthImage {
        let mut cells = vec![None; 9];
        cells[0] = Some(Cell {
            object: 0,
            color: 0,
            size: 1,
        });
        SynthImage { grid_size: 3, cells }
    }

    #[test]
    fn oracle_examples() {
        let img = ball_image();
        assert_eq!(oracle_answer(&img, &Query::Color { object: 0 }).unwrap(), "red");
        assert_eq!(oracle_answer(&img, &Query::Presence { object: 6 }).unwrap(), "no");
        assert_eq!(oracle_answer(&img, &Query::Caption).unwrap(), "big red ball.");
        assert_eq!(
            oracle_answer(&img, &Query::Color { object: 6 }),
            Err(SynthError::Unanswerable)
        );
        assert_eq!(answer_or_unanswerable(&img, &Query::Region { cell: 4 }), UNANSWERABLE);
    }

    #[test]
    fn parse_recovers_ball_question() {
        let (q, p) = parse_query("what color is the ball?", 3).unwrap();
        assert_eq!(q, Query::Color { object: 0 });
        assert_eq!(p, Some(0));
        assert_eq!(oracle_answer(&ball_image(), &q).unwrap(), "red");
    }

    #[test]
    fn mix_parsing() {
        let m: TaskMix = "qa=0.5,caption=0.5".parse().unwrap();
        assert_eq!(m.0.len(), 2);
        assert!("qa=0.5".parse::<TaskMix>().is_err());
        assert!("nope=1.0".parse::<TaskMix>().is_err());
        TaskMix::dominated_by(TaskKind::Qa, 0.1).validate().unwrap();
    }

    #[test]
    fn region_names_are_distinct() {
        let names: std::collections::BTreeSet<String> = (0..9).map(|i| region_name(3, i)).collect();
        assert_eq!(names.len(), 9);
    }
}
