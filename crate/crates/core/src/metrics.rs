//! Diagnostics over trained models: response NLL, visual contribution,
//! CHAIR hallucination rates, answer accuracy, attention probing at the
//! answer anchor, and training throughput.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{answer_prompt, serialize, ConversationSample, MaskMode, SerializedSample, TaskKind, Turn};
use crate::model::{generate_greedy_batch, Input, LogitModel, ModelError, TinyMLLM, Visual};
use crate::tensor::Tensor;
use crate::tokenizer::{normalize, words, SPECIALS};
use crate::trainer::{row_nll, PreparedSample, Preprocessor, TrainConfig, TrainError, Trainer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Steps excluded from throughput means.
pub const BENCH_WARMUP_STEPS: usize = 5;
pub const BENCH_RATIOS: [f64; 5] = [0.05, 0.1, 1.0, 10.0, 20.0];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("paired lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample {0} has no answer anchor")]
    AnchorMissing(String),
    #[error("sample {0} has no image")]
    NoImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per turn, the log-probability of each response token (including the
/// closing `<eos>`) under `logits`.
pub fn response_logprobs(logits: &Tensor, ser: &SerializedSample) -> Vec<Vec<f64>> {
    ser.response_spans
        .iter()
        .map(|span| {
            span.clone()
                .map(|r| -row_nll(logits.row(r - 1), ser.ids[r]))
                .collect()
        })
        .collect()
}

fn response_sum(logits: &Tensor, ser: &SerializedSample) -> f64 {
    response_logprobs(logits, ser).iter().flatten().sum()
}

/// Sum of `-log p` over response targets.
pub fn response_nll(model: &impl LogitModel, sample: &PreparedSample) -> Result<f64> {
    let logits = model.batch_logits(&[sample.input()])?;
    Ok(-response_sum(&logits[0], &sample.ser))
}

const EVAL_BATCH: usize = 32;

/// Mean per-sample response NLL.
pub fn mean_response_nll(model: &impl LogitModel, samples: &[PreparedSample]) -> std::result::Result<f64, ModelError> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs: Vec<Input<'_>> = chunk.iter().map(|s| s.input()).collect();
        for (l, s) in model.batch_logits(&inputs)?.iter().zip(chunk) {
            total -= response_sum(l, &s.ser);
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Seed of the noise image for a sample: a hash of its id mixed with `base`.
pub fn noise_seed_for(sample_id: &str, base: u64) -> u64 {
    let h = Sha256::digest(sample_id.as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) ^ base
}

/// Uniform(-1, 1) noise image; draw `k` uses stream `k` of the seed.
pub fn noise_feature(dim: usize, seed: u64, draw: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcValue {
    /// Summed over response tokens, in nats.
    pub sum: f64,
    pub per_token: f64,
    pub per_turn: Vec<f64>,
}

/// VC from the real-image logits and one logits tensor per noise draw.
pub fn vc_from_logits(real: &Tensor, noise: &[Tensor], ser: &SerializedSample) -> VcValue {
    let real_lp = response_logprobs(real, ser);
    let k = noise.len() as f64;
    let mut per_turn: Vec<f64> = real_lp.iter().map(|t| t.iter().sum()).collect();
    for n in noise {
        for (acc, turn) in per_turn.iter_mut().zip(response_logprobs(n, ser)) {
            *acc -= turn.iter().sum::<f64>() / k;
        }
    }
    let tokens: usize = real_lp.iter().map(Vec::len).sum();
    let sum: f64 = per_turn.iter().sum();
    VcValue {
        sum,
        per_token: sum / tokens.max(1) as f64,
        per_turn,
    }
}

/// `log p(A | V, I) - log p(A | noise, I)` with the given noise images.
pub fn visual_contribution_with_noise(
    model: &impl LogitModel,
    sample: &PreparedSample,
    noise: &[Vec<f64>],
) -> Result<VcValue> {
    if sample.image.is_empty() {
        return Err(MetricsError::NoImage(sample.id.clone()));
    }
    if noise.is_empty() {
        return Err(MetricsError::InvalidArgument("at least one noise draw".into()));
    }
    let mut inputs = vec![sample.input()];
    inputs.extend(noise.iter().map(|n| Input {
        visual: Some(Visual::Feature(n)),
        ids: &sample.ser.ids,
    }));
    let logits = model.batch_logits(&inputs)?;
    Ok(vc_from_logits(&logits[0], &logits[1..], &sample.ser))
}

/// VC averaged over `draws` noise images seeded from `noise_seed`.
pub fn visual_contribution(
    model: &impl LogitModel,
    sample: &PreparedSample,
    noise_seed: u64,
    draws: usize,
) -> Result<VcValue> {
    let noise: Vec<Vec<f64>> = (0..draws as u64)
        .map(|d| noise_feature(sample.image.len(), noise_seed, d))
        .collect();
    visual_contribution_with_noise(model, sample, &noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairSample {
    pub mentioned: Vec<String>,
    pub hallucinated: Vec<String>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub n_captions: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
    pub per_sample: Vec<ChairSample>,
}

/// Object mentions are caption tokens in `object_vocab`, deduplicated per
/// caption. Captions mentioning no object add nothing to the CHAIR_i
/// denominator and are never flagged.
pub fn chair<S: AsRef<str>>(
    captions: &[S],
    gt: &[Vec<String>],
    object_vocab: &BTreeSet<String>,
) -> Result<ChairReport> {
    if captions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    if captions.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(captions.len(), gt.len()));
    }
    let mut per_sample = Vec::with_capacity(captions.len());
    let (mut n_mentioned, mut n_hall, mut n_flag) = (0, 0, 0);
    for (cap, truth) in captions.iter().zip(gt) {
        let truth: BTreeSet<&str> = truth.iter().map(String::as_str).collect();
        let mentioned: BTreeSet<String> = words(cap.as_ref())
            .into_iter()
            .filter(|w| object_vocab.contains(w))
            .collect();
        let hallucinated: Vec<String> = mentioned
            .iter()
            .filter(|m| !truth.contains(m.as_str()))
            .cloned()
            .collect();
        n_mentioned += mentioned.len();
        n_hall += hallucinated.len();
        let flagged = !hallucinated.is_empty();
        n_flag += usize::from(flagged);
        per_sample.push(ChairSample {
            mentioned: mentioned.into_iter().collect(),
            hallucinated,
            flagged,
        });
    }
    Ok(ChairReport {
        chair_s: n_flag as f64 / captions.len() as f64,
        chair_i: if n_mentioned == 0 {
            0.0
        } else {
            n_hall as f64 / n_mentioned as f64
        },
        n_captions: captions.len(),
        n_mentioned,
        n_hallucinated: n_hall,
        per_sample,
    })
}

/// Lowercased, tokenized, with one trailing sentence terminator dropped.
pub fn normalize_answer(s: &str) -> String {
    let n = normalize(s);
    for t in [" .", " ?", " !"] {
        if let Some(stripped) = n.strip_suffix(t) {
            return stripped.to_string();
        }
    }
    if n == "." || n == "?" || n == "!" {
        return String::new();
    }
    n
}

/// Fraction of exact matches after [`normalize_answer`]; `0` for empty
/// lists.
pub fn accuracy<A: AsRef<str>, B: AsRef<str>>(outputs: &[A], answers: &[B]) -> Result<f64> {
    if outputs.len() != answers.len() {
        return Err(MetricsError::LengthMismatch(outputs.len(), answers.len()));
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let hits = outputs
        .iter()
        .zip(answers)
        .filter(|(o, a)| normalize_answer(o.as_ref()) == normalize_answer(a.as_ref()))
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub anchor: usize,
    /// Per head, attention mass from the anchor onto the visual positions.
    pub masses: Vec<f64>,
    /// Per head, the full attention row of the anchor.
    pub rows: Vec<Vec<f64>>,
}

/// Probe of a `[heads, T, T]` attention tensor at the first answer anchor.
pub fn probe_from_attention(att: &Tensor, ser: &SerializedSample, sample_id: &str) -> Result<ProbeResult> {
    let anchor = ser
        .answer_anchor_index()
        .filter(|&a| a < ser.len())
        .ok_or_else(|| MetricsError::AnchorMissing(sample_id.to_string()))?;
    let (heads, t) = (att.shape()[0], att.shape()[1]);
    let vis = ser.image_start..ser.image_start + ser.visual_slot_count;
    let mut masses = Vec::with_capacity(heads);
    let mut rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let row = att.data()[(h * t + anchor) * t..(h * t + anchor + 1) * t].to_vec();
        masses.push(row[vis.clone()].iter().sum());
        rows.push(row);
    }
    Ok(ProbeResult { anchor, masses, rows })
}

/// Last-layer visual attention mass per head at the answer anchor.
pub fn attention_probe(model: &TinyMLLM, sample: &PreparedSample) -> Result<ProbeResult> {
    let out = model.forward(sample.visual(), &sample.ser.ids)?;
    let last = out
        .attentions
        .last()
        .ok_or_else(|| MetricsError::InvalidArgument("model has no layers".into()))?;
    probe_from_attention(last, &sample.ser, &sample.id)
}

/// `head × position` matrix, one row per head.
pub fn write_attention_csv(path: &Path, probe: &ProbeResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let t = probe.rows.first().map_or(0, Vec::len);
    let mut header = vec!["head".to_string()];
    header.extend((0..t).map(|i| format!("p{i}")));
    w.write_record(&header)?;
    for (h, row) in probe.rows.iter().enumerate() {
        let mut rec = vec![h.to_string()];
        rec.extend(row.iter().map(|x| format!("{x:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub noise_seed: u64,
    pub vc_noise_draws: usize,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            noise_seed: 0,
            vc_noise_draws: 1,
            batch: EVAL_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub task_kind: TaskKind,
    pub response_tokens: usize,
    pub response_nll: f64,
    pub vc: f64,
    pub vc_per_token: f64,
    /// Last-layer visual attention mass per head at the answer anchor.
    pub attn_visual: Vec<f64>,
}

/// Response NLL, VC and attention probe for every sample, computed in
/// packed batches.
pub fn evaluate(model: &TinyMLLM, samples: &[PreparedSample], cfg: &EvalConfig) -> Result<Vec<SampleMetrics>> {
    if cfg.vc_noise_draws == 0 || cfg.batch == 0 {
        return Err(MetricsError::InvalidArgument("noise draws and batch must be positive".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch) {
        let noise: Vec<Vec<Vec<f64>>> = chunk
            .iter()
            .map(|s| {
                if s.image.is_empty() {
                    return Err(MetricsError::NoImage(s.id.clone()));
                }
                let seed = noise_seed_for(&s.id, cfg.noise_seed);
                Ok((0..cfg.vc_noise_draws as u64)
                    .map(|d| noise_feature(s.image.len(), seed, d))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let real = model.forward_batch(&chunk.iter().map(|s| s.input()).collect::<Vec<_>>())?;
        let noise_inputs: Vec<Input<'_>> = chunk
            .iter()
            .zip(&noise)
            .flat_map(|(s, ns)| {
                ns.iter().map(move |n| Input {
                    visual: Some(Visual::Feature(n)),
                    ids: &s.ser.ids,
                })
            })
            .collect();
        let noise_logits = model.batch_logits(&noise_inputs)?;
        for (i, (s, r)) in chunk.iter().zip(&real).enumerate() {
            let k = cfg.vc_noise_draws;
            let vc = vc_from_logits(&r.logits, &noise_logits[i * k..(i + 1) * k], &s.ser);
            let lps = response_logprobs(&r.logits, &s.ser);
            let probe = probe_from_attention(r.attentions.last().expect("layers"), &s.ser, &s.id)?;
            out.push(SampleMetrics {
                sample_id: s.id.clone(),
                task_kind: s.task_kind,
                response_tokens: lps.iter().map(Vec::len).sum(),
                response_nll: -lps.iter().flatten().sum::<f64>(),
                vc: vc.sum,
                vc_per_token: vc.per_token,
                attn_visual: probe.masses,
            });
        }
    }
    Ok(out)
}

/// Greedy answers to the first turn of each sample.
pub fn generate_answers(
    model: &impl LogitModel,
    samples: &[PreparedSample],
    pre: &Preprocessor,
    max_new: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let prompts: Vec<(Option<Visual<'_>>, &[usize])> =
            chunk.iter().map(|s| (s.visual(), answer_prompt(&s.ser))).collect();
        for ids in generate_greedy_batch(model, &prompts, max_new)? {
            out.push(pre.vocab.decode(&ids).map_err(TrainError::from)?);
        }
    }
    Ok(out)
}

/// Accuracy of greedy answers against the samples' oracle answers.
pub fn answer_accuracy(
    model: &impl LogitModel,
    samples: &[PreparedSample],
    pre: &Preprocessor,
    max_new: usize,
) -> Result<f64> {
    let answers: Vec<&str> = samples
        .iter()
        .map(|s| s.answer.as_deref().ok_or_else(|| MetricsError::InvalidArgument(format!("{} has no answer", s.id))))
        .collect::<Result<_>>()?;
    let outputs = generate_answers(model, samples, pre, max_new)?;
    accuracy(&outputs, &answers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub mean_response_nll: f64,
    pub mean_vc: f64,
    pub mean_vc_per_token: f64,
    pub mean_attn_visual: f64,
}

pub fn aggregate(m: &[SampleMetrics]) -> Aggregates {
    let n = m.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| m.iter().map(f).sum::<f64>() / n;
    Aggregates {
        n: m.len(),
        mean_response_nll: mean(&|s| s.response_nll),
        mean_vc: mean(&|s| s.vc),
        mean_vc_per_token: mean(&|s| s.vc_per_token),
        mean_attn_visual: mean(&|s| s.attn_visual.iter().sum::<f64>() / s.attn_visual.len().max(1) as f64),
    }
}

/// One row per sample: id, kind, tokens, NLL, VC, VC per token, mean
/// visual attention.
pub fn write_sample_csv(path: &Path, m: &[SampleMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "sample_id",
        "task_kind",
        "response_tokens",
        "response_nll",
        "vc",
        "vc_per_token",
        "attn_visual_mean",
    ])?;
    for s in m {
        let attn = s.attn_visual.iter().sum::<f64>() / s.attn_visual.len().max(1) as f64;
        w.write_record([
            s.sample_id.clone(),
            s.task_kind.name().to_string(),
            s.response_tokens.to_string(),
            format!("{:e}", s.response_nll),
            format!("{:e}", s.vc),
            format!("{:e}", s.vc_per_token),
            format!("{attn:e}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of the JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_sample_csv: Vec<String>,
}

impl Report {
    pub fn new(config_hash: String) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash,
            metrics: BTreeMap::new(),
            per_sample_csv: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `(L_I, L_A)` with `L_I + L_A = total` and `L_I / L_A` close to `ratio`.
pub fn split_lengths(ratio: f64, total: usize) -> (usize, usize) {
    let li = ((total as f64) * ratio / (1.0 + ratio)).round() as usize;
    let li = li.clamp(1, total - 1);
    (li, total - li)
}

/// Samples whose instruction and response are random vocabulary words of
/// lengths set by `ratio`, all with the same total length.
pub fn bench_samples(
    pre: &Preprocessor,
    ratio: f64,
    total_len: usize,
    feature_dim: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<PreparedSample>> {
    if total_len < 2 {
        return Err(MetricsError::InvalidArgument("total_len must be at least 2".into()));
    }
    let (li, la) = split_lengths(ratio, total_len);
    let pool: Vec<&str> = pre.vocab.tokens()[SPECIALS.len()..]
        .iter()
        .map(String::as_str)
        .filter(|w| w.chars().all(char::is_alphanumeric))
        .collect();
    if pool.is_empty() {
        return Err(MetricsError::InvalidArgument("vocabulary has no words".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |k: usize| -> String {
        (0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sample = ConversationSample {
            image_id: format!("bench-{i}"),
            turns: vec![Turn {
                instruction: pick(li),
                response: pick(la),
            }],
            task_kind: TaskKind::Qa,
        };
        let ser = serialize(&sample, &pre.chat, &pre.templates, &pre.vocab).map_err(TrainError::from)?;
        let image = (0..feature_dim).map(|j| ((i * 31 + j) % 7) as f64 / 7.0).collect();
        out.push(PreparedSample {
            id: sample.image_id,
            task_kind: TaskKind::Qa,
            ser,
            image,
            answer: None,
            gt_objects: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: MaskMode,
    pub batch: usize,
    pub timed_steps: usize,
    pub mean_step_ms: f64,
    pub steps_per_s: f64,
    pub samples_per_s: f64,
}

fn bench_result(mode: MaskMode, batch: usize, times: &[f64]) -> BenchResult {
    let timed = &times[BENCH_WARMUP_STEPS.min(times.len())..];
    let mean = timed.iter().sum::<f64>() / timed.len().max(1) as f64;
    BenchResult {
        mode,
        batch,
        timed_steps: timed.len(),
        mean_step_ms: mean * 1e3,
        steps_per_s: 1.0 / mean,
        samples_per_s: batch as f64 / mean,
    }
}

/// Times full training steps (forward, backward, update) of a copy of
/// `model` for each mode in `modes`. Steps of the different modes are
/// interleaved, in alternating order, so slow drifts in machine speed hit
/// all modes alike.
pub fn throughput_bench(
    model: &TinyMLLM,
    samples: &[PreparedSample],
    modes: &[MaskMode],
    batch: usize,
    n_steps: usize,
) -> Result<Vec<BenchResult>> {
    if n_steps < 10 {
        return Err(MetricsError::InvalidArgument("n_steps must be at least 10".into()));
    }
    if samples.is_empty() || batch == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    let total = n_steps + BENCH_WARMUP_STEPS;
    let cfg = TrainConfig {
        from_scratch: true,
        ..TrainConfig::default()
    };
    let mut runs: Vec<(TinyMLLM, Trainer)> = modes
        .iter()
        .map(|&m| {
            let copy = model.clone();
            let t = Trainer::new(&copy, &cfg, m, total)?;
            Ok((copy, t))
        })
        .collect::<std::result::Result<_, TrainError>>()?;
    let mut times = vec![Vec::with_capacity(total); modes.len()];
    for step in 0..total {
        let batch_refs: Vec<&PreparedSample> = (0..batch).map(|i| &samples[(step * batch + i) % samples.len()]).collect();
        // alternate the order so no mode always runs first
        for j in 0..runs.len() {
            let k = if step % 2 == 0 { j } else { runs.len() - 1 - j };
            let (m, t) = &mut runs[k];
            let started = Instant::now();
            t.step(m, &batch_refs)?;
            times[k].push(started.elapsed().as_secs_f64());
        }
    }
    Ok(modes
        .iter()
        .zip(&times)
        .map(|(&m, t)| bench_result(m, batch, t))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chair_worked_example() {
        let vocab: BTreeSet<String> = ["dog", "cat", "mat"].iter().map(|s| s.to_string()).collect();
        let r = chair(&["a dog and a cat on the mat"], &[vec!["dog".into(), "mat".into()]], &vocab).unwrap();
        assert!((r.chair_i - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.per_sample[0].flagged);
        assert_eq!(r.chair_s, 1.0);
    }

    #[test]
    fn chair_zero_object_caption() {
        let vocab: BTreeSet<String> = ["dog"].iter().map(|s| s.to_string()).collect();
        let r = chair(&["nothing here", "a dog"], &[vec![], vec!["dog".into()]], &vocab).unwrap();
        assert_eq!(r.n_mentioned, 1);
        assert_eq!(r.chair_i, 0.0);
        assert!(!r.per_sample[0].flagged);
        assert!(matches!(
            chair::<&str>(&[], &[], &vocab),
            Err(MetricsError::EmptyCorpus)
        ));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "x"]).unwrap(), 0.75);
        assert!(matches!(accuracy(&["a"], &["a", "b"]), Err(MetricsError::LengthMismatch(1, 2))));
        assert_eq!(accuracy(&["Red."], &["red"]).unwrap(), 1.0);
    }

    #[test]
    fn split_lengths_cover_ratios() {
        assert_eq!(split_lengths(1.0, 64), (32, 32));
        assert_eq!(split_lengths(20.0, 63), (60, 3));
        assert_eq!(split_lengths(0.05, 63), (3, 60));
    }
}
