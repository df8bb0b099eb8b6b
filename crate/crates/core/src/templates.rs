//! Task-template mining by corpus-wide sentence frequency.
//!
//! A sentence is a task template when it appears in at least `theta` of all
//! instructions (counted once per instruction). Templates are stored and
//! matched as normalized strings with case and punctuation preserved.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Removed task templates listed for the LLaVA-mix-665k data, verbatim.
pub const LLAVA_MIX_TEMPLATES: &str = include_str!("../data/llava_mix_templates.txt");

pub const DEFAULT_THETA: f64 = 0.01;

const TERMINATORS: [char; 4] = ['.', '?', '!', ':'];
const FREQ_PREFIX: &str = "# freq ";
const SYSTEM_PREFIX: &str = "# system: ";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("malformed template file line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("theta must lie in (0, 1), got {0}")]
    BadTheta(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Collapses whitespace runs, trims, and drops whitespace directly before a
/// sentence terminator.
pub fn normalize_sentence(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = String::with_capacity(collapsed.len());
    for ch in collapsed.chars() {
        if TERMINATORS.contains(&ch) && out.ends_with(' ') {
            out.pop();
        }
        out.push(ch);
    }
    out
}

/// Splits on `.`, `?`, `!` and `:`, keeping the terminator with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if TERMINATORS.contains(&ch) {
            push_fragment(&mut out, &cur);
            cur.clear();
        }
    }
    push_fragment(&mut out, &cur);
    out
}

fn push_fragment(out: &mut Vec<String>, frag: &str) {
    let body = frag.trim_end_matches(TERMINATORS);
    if !body.trim().is_empty() {
        out.push(normalize_sentence(frag));
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateSet {
    /// Normalized sentence → number of samples containing it (0 for
    /// manually added entries).
    pub task_templates: BTreeMap<String, usize>,
    pub system_templates: Vec<String>,
}

impl TemplateSet {
    /// The LLaVA-mix list shipped with the crate.
    pub fn llava_mix() -> Self {
        let mut set = Self::default();
        for line in LLAVA_MIX_TEMPLATES.lines().filter(|l| !l.trim().is_empty()) {
            set.task_templates.insert(normalize_sentence(line), 0);
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        self.task_templates.is_empty() && self.system_templates.is_empty()
    }

    pub fn contains(&self, sentence: &str) -> bool {
        self.task_templates.contains_key(sentence)
    }

    pub fn len(&self) -> usize {
        self.task_templates.len()
    }

    /// Applies a manual override file: `- sentence` removes, `+ sentence` or
    /// a bare sentence adds; `#` lines are comments.
    pub fn apply_overrides(&mut self, text: &str) {
        for line in text.lines() {
            let l = line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(rest) = l.strip_prefix("- ") {
                self.task_templates.remove(&normalize_sentence(rest));
            } else {
                let s = l.strip_prefix("+ ").unwrap_or(l);
                self.task_templates.entry(normalize_sentence(s)).or_insert(0);
            }
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sys in &self.system_templates {
            s.push_str(SYSTEM_PREFIX);
            s.push_str(sys);
            s.push('\n');
        }
        for (sentence, freq) in &self.task_templates {
            s.push_str(&format!("{FREQ_PREFIX}{freq}\n{sentence}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        let mut pending: Option<(usize, usize)> = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if let Some(rest) = line.strip_prefix(FREQ_PREFIX) {
                if pending.is_some() {
                    return Err(TemplateError::MalformedLine {
                        line: lineno,
                        reason: "frequency comment without a sentence".into(),
                    });
                }
                let f = rest.trim().parse().map_err(|_| TemplateError::MalformedLine {
                    line: lineno,
                    reason: format!("bad frequency {rest:?}"),
                })?;
                pending = Some((f, lineno));
            } else if let Some(rest) = line.strip_prefix(SYSTEM_PREFIX) {
                set.system_templates.push(rest.to_string());
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                let s = normalize_sentence(line);
                if s != line {
                    return Err(TemplateError::MalformedLine {
                        line: lineno,
                        reason: "sentence is not normalized".into(),
                    });
                }
                let f = pending.take().map_or(0, |p| p.0);
                set.task_templates.insert(s, f);
            }
        }
        if let Some((_, line)) = pending {
            return Err(TemplateError::MalformedLine {
                line,
                reason: "frequency comment at end of file".into(),
            });
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Per-sample sentence counts; shards can be counted independently and
/// merged with [`merge_counts`].
pub fn count_sentences<'s, I>(corpus: I) -> (BTreeMap<String, usize>, usize)
where
    I: IntoIterator<Item = &'s str>,
{
    let mut counts = BTreeMap::new();
    let mut n = 0;
    for text in corpus {
        n += 1;
        let unique: BTreeSet<String> = split_sentences(text).into_iter().collect();
        for s in unique {
            *counts.entry(s).or_insert(0) += 1;
        }
    }
    (counts, n)
}

pub fn merge_counts(
    mut a: (BTreeMap<String, usize>, usize),
    b: (BTreeMap<String, usize>, usize),
) -> (BTreeMap<String, usize>, usize) {
    for (k, v) in b.0 {
        *a.0.entry(k).or_insert(0) += v;
    }
    (a.0, a.1 + b.1)
}

/// Sentences occurring in more than `theta * |corpus|` instructions.
pub fn mine_templates<'s, I>(corpus: I, theta: f64) -> Result<TemplateSet, TemplateError>
where
    I: IntoIterator<Item = &'s str>,
{
    if !(theta > 0.0 && theta < 1.0) {
        return Err(TemplateError::BadTheta(theta));
    }
    Ok(select(count_sentences(corpus), theta))
}

/// Thresholds a (possibly merged) count map.
pub fn select((counts, n): (BTreeMap<String, usize>, usize), theta: f64) -> TemplateSet {
    let cutoff = theta * n as f64;
    let kept: BTreeMap<String, usize> = counts
        .into_iter()
        .filter(|(_, c)| *c as f64 > cutoff)
        .collect();
    TemplateSet {
        task_templates: kept,
        system_templates: Vec::new(),
    }
}
