//! Tiny multimodal decoder: frozen encoder `g`, connector `h`, and a
//! pre-LayerNorm causal transformer `f`.
//!
//! `g` splits the feature vector into `N` equal chunks (zero-padded) and maps
//! each through one shared fixed random matrix, giving one visual token per
//! chunk. Visual tokens replace the embeddings of the `<image>` slots in the
//! token sequence and receive the slot positions' position embeddings.
//!
//! Several sequences can be run as one packed batch: their rows are stacked
//! and attention never crosses a sequence boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::tokenizer::{EOS, IMAGE};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"L2TLABCK";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("image given but the sequence has {found} contiguous <image> slots, expected {expected}")]
    SlotMismatch { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    /// Linear, GELU, linear.
    #[default]
    Mlp,
    /// `h(x) = x`; requires `d_enc == d_model`.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MllmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_visual_tokens: usize,
    pub feature_dim: usize,
    pub d_enc: usize,
    pub max_seq_len: usize,
    pub connector: ConnectorKind,
    pub seed: u64,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            n_visual_tokens: 9,
            feature_dim: 369,
            d_enc: 64,
            max_seq_len: 256,
            connector: ConnectorKind::Mlp,
            seed: 0,
        }
    }
}

impl MllmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_visual_tokens == 0 {
            return bad("n_visual_tokens must be at least 1".into());
        }
        if self.connector == ConnectorKind::Identity && self.d_enc != self.d_model {
            return bad("identity connector needs d_enc == d_model".into());
        }
        if [self.d_model, self.d_ff, self.vocab_size, self.feature_dim, self.d_enc, self.max_seq_len]
            .contains(&0)
        {
            return bad("sizes must be positive".into());
        }
        Ok(())
    }

    /// Width of one encoder chunk.
    pub fn chunk(&self) -> usize {
        self.feature_dim.div_ceil(self.n_visual_tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Connector,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: usize,
    conn: Option<[usize; 4]>,
    tok: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

/// Visual input of one sequence.
#[derive(Debug, Clone, Copy)]
pub enum Visual<'a> {
    /// Raw feature vector, passed through `h(g(.))`.
    Feature(&'a [f64]),
    /// Precomputed visual tokens `[N, d_model]`.
    Tokens(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub visual: Option<Visual<'a>>,
    pub ids: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T, V]`
    pub logits: Tensor,
    /// Per layer, `[heads, T, T]`.
    pub attentions: Vec<Tensor>,
}

/// A packed forward pass recorded on a graph.
pub struct Built {
    pub logits: Var,
    pub attentions: Vec<Var>,
    pub segments: Vec<usize>,
    /// One var per parameter, in parameter order.
    pub params: Vec<Var>,
}

/// Anything that maps token sequences to next-token logits.
pub trait LogitModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `[T_i, V]` logits for each input.
    fn batch_logits(&self, inputs: &[Input<'_>]) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyMLLM {
    config: MllmConfig,
    params: Vec<Param>,
    layout: Layout,
    trainable: [bool; 3],
    pretrained: bool,
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::Connector => 1,
        ParamGroup::Decoder => 2,
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Init {
    fn add(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut self.rng)).collect()
        };
        self.params.push(Param {
            name,
            group,
            value: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        });
        self.params.len() - 1
    }

    fn ones(&mut self, name: String, group: ParamGroup, n: usize) -> usize {
        self.params.push(Param {
            name,
            group,
            value: Tensor::full(&[n], 1.0),
        });
        self.params.len() - 1
    }
}

impl TinyMLLM {
    pub fn new(config: MllmConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(c.seed),
            params: Vec::new(),
        };
        use ParamGroup::*;
        // one-hot cells have three active entries
        let enc = init.add("encoder.proj".into(), Encoder, &[c.chunk(), c.d_enc], 1.0 / 3f64.sqrt());
        let conn = match c.connector {
            ConnectorKind::Mlp => Some([
                init.add("connector.w1".into(), Connector, &[c.d_enc, d], 1.0 / (c.d_enc as f64).sqrt()),
                init.add("connector.b1".into(), Connector, &[d], 0.0),
                init.add("connector.w2".into(), Connector, &[d, d], 0.02),
                init.add("connector.b2".into(), Connector, &[d], 0.0),
            ]),
            ConnectorKind::Identity => None,
        };
        let tok = init.add("decoder.tok_emb".into(), Decoder, &[c.vocab_size, d], 0.02);
        let pos = init.add("decoder.pos_emb".into(), Decoder, &[c.max_seq_len, d], 0.02);
        let out_std = 0.02 / (2.0 * c.n_layers as f64).sqrt();
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("decoder.layer{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: init.ones(p("ln1.gamma"), Decoder, d),
                ln1_b: init.add(p("ln1.beta"), Decoder, &[d], 0.0),
                wq: init.add(p("attn.wq"), Decoder, &[d, d], 0.02),
                wk: init.add(p("attn.wk"), Decoder, &[d, d], 0.02),
                wv: init.add(p("attn.wv"), Decoder, &[d, d], 0.02),
                wo: init.add(p("attn.wo"), Decoder, &[d, d], out_std),
                ln2_g: init.ones(p("ln2.gamma"), Decoder, d),
                ln2_b: init.add(p("ln2.beta"), Decoder, &[d], 0.0),
                w1: init.add(p("mlp.w1"), Decoder, &[d, c.d_ff], 0.02),
                b1: init.add(p("mlp.b1"), Decoder, &[c.d_ff], 0.0),
                w2: init.add(p("mlp.w2"), Decoder, &[c.d_ff, d], out_std),
                b2: init.add(p("mlp.b2"), Decoder, &[d], 0.0),
            });
        }
        let lnf_g = init.ones("decoder.ln_f.gamma".into(), Decoder, d);
        let lnf_b = init.add("decoder.ln_f.beta".into(), Decoder, &[d], 0.0);
        let head = init.add("decoder.head".into(), Decoder, &[d, c.vocab_size], 0.02);
        Ok(Self {
            layout: Layout {
                enc,
                conn,
                tok,
                pos,
                layers,
                lnf_g,
                lnf_b,
                head,
            },
            params: init.params,
            config,
            trainable: [false, true, true],
            pretrained: false,
        })
    }

    pub fn config(&self) -> &MllmConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable parameter values; the encoder is never handed out.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (usize, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| p.group != ParamGroup::Encoder)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Set once connector pretraining has run.
    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable[group_index(group)]
    }

    /// The encoder stays frozen whatever is requested.
    pub fn set_trainable(&mut self, group: ParamGroup, on: bool) {
        if group != ParamGroup::Encoder {
            self.trainable[group_index(group)] = on;
        }
    }

    /// Hash of all values in `group`, for bitwise freeze checks.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Scales every connector weight and bias; `0.0` makes `h` constant zero.
    pub fn scale_connector(&mut self, s: f64) {
        for p in self.params.iter_mut().filter(|p| p.group == ParamGroup::Connector) {
            p.value.scale_assign(s);
        }
    }

    /// Replaces the value of parameter `name`; shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("no parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(ModelError::DimMismatch {
                expected: p.value.numel(),
                got: value.numel(),
            });
        }
        p.value = value;
        Ok(())
    }

    fn feature_rows(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        if feature.len() != c.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: c.feature_dim,
                got: feature.len(),
            });
        }
        let mut rows = feature.to_vec();
        rows.resize(c.chunk() * c.n_visual_tokens, 0.0);
        Ok(rows)
    }

    /// `g(feature)` as `[N, d_enc]`.
    pub fn encoder_output(&self, feature: &[f64]) -> Result<Tensor> {
        let c = &self.config;
        let x = Tensor::new(vec![c.n_visual_tokens, c.chunk()], self.feature_rows(feature)?)?;
        Ok(x.matmul(&self.params[self.layout.enc].value)?)
    }

    /// `H_V = h(g(feature))`, `[N, d_model]`.
    pub fn encode_image(&self, feature: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(&p.value, false)).collect();
        let c = &self.config;
        let x = g.leaf_owned(
            Tensor::new(vec![c.n_visual_tokens, c.chunk()], self.feature_rows(feature)?)?,
            false,
        );
        let v = self.visual_path(&mut g, &params, x)?;
        Ok(g.value(v).clone())
    }

    fn visual_path(&self, g: &mut Graph<'_>, p: &[Var], rows: Var) -> Result<Var> {
        let e = g.matmul(rows, p[self.layout.enc])?;
        Ok(match self.layout.conn {
            Some([w1, b1, w2, b2]) => {
                let a = g.matmul(e, p[w1])?;
                let a = g.add_bias(a, p[b1])?;
                let a = g.gelu(a)?;
                let a = g.matmul(a, p[w2])?;
                g.add_bias(a, p[b2])?
            }
            None => e,
        })
    }

    /// Start of the `<image>` slot run that receives visual tokens.
    fn slot_start(&self, ids: &[usize]) -> Result<usize> {
        let n = self.config.n_visual_tokens;
        let first = ids.iter().position(|&i| i == IMAGE);
        let found = ids.iter().filter(|&&i| i == IMAGE).count();
        match first {
            Some(s) if found == n && ids[s..s + n].iter().all(|&i| i == IMAGE) => Ok(s),
            _ => Err(ModelError::SlotMismatch { expected: n, found }),
        }
    }

    /// Records a packed forward pass of `inputs` on `g`. Parameter leaves
    /// track gradients when `track` is set and their group is trainable.
    pub fn build<'g>(&'g self, g: &mut Graph<'g>, inputs: &[Input<'_>], track: bool) -> Result<Built> {
        let c = &self.config;
        let l = &self.layout;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(&p.value, track && self.is_trainable(p.group)))
            .collect();
        let mut all_ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let t = inp.ids.len();
            if t == 0 {
                return Err(ModelError::InvalidConfig("empty sequence".into()));
            }
            if t > c.max_seq_len {
                return Err(ModelError::SequenceTooLong {
                    len: t,
                    max: c.max_seq_len,
                });
            }
            all_ids.extend_from_slice(inp.ids);
            positions.extend(0..t);
            segments.push(t);
        }
        let tok = g.embedding(params[l.tok], &all_ids)?;

        // visual tokens for every input with an image, feature inputs batched
        let mut feature_rows = Vec::new();
        let mut n_features = 0;
        for inp in inputs {
            if let Some(Visual::Feature(f)) = inp.visual {
                feature_rows.extend(self.feature_rows(f)?);
                n_features += 1;
            }
        }
        let n = c.n_visual_tokens;
        let feature_visual = if n_features > 0 {
            let rows = g.leaf_owned(Tensor::new(vec![n_features * n, c.chunk()], feature_rows)?, false);
            Some(self.visual_path(g, &params, rows)?)
        } else {
            None
        };
        let mut x = tok;
        if inputs.iter().any(|i| i.visual.is_some()) {
            let mut parts = Vec::new();
            let (mut off, mut fi) = (0, 0);
            for inp in inputs {
                let t = inp.ids.len();
                let visual = match inp.visual {
                    None => None,
                    Some(Visual::Feature(_)) => {
                        let v = g.slice_rows(feature_visual.expect("features batched"), fi * n, n)?;
                        fi += 1;
                        Some(v)
                    }
                    Some(Visual::Tokens(t)) => {
                        if t.shape() != [n, c.d_model] {
                            return Err(ModelError::DimMismatch {
                                expected: n * c.d_model,
                                got: t.numel(),
                            });
                        }
                        Some(g.leaf_owned(t.clone(), false))
                    }
                };
                match visual {
                    None => parts.push(g.slice_rows(tok, off, t)?),
                    Some(v) => {
                        let s = self.slot_start(inp.ids)?;
                        if s > 0 {
                            parts.push(g.slice_rows(tok, off, s)?);
                        }
                        parts.push(v);
                        if s + n < t {
                            parts.push(g.slice_rows(tok, off + s + n, t - s - n)?);
                        }
                    }
                }
                off += t;
            }
            x = g.concat_rows(&parts)?;
        }
        let pos = g.embedding(params[l.pos], &positions)?;
        x = g.add(x, pos)?;

        let mut attentions = Vec::with_capacity(l.layers.len());
        for li in &l.layers {
            let a = g.layer_norm(x, params[li.ln1_g], params[li.ln1_b])?;
            let q = g.matmul(a, params[li.wq])?;
            let k = g.matmul(a, params[li.wk])?;
            let v = g.matmul(a, params[li.wv])?;
            let att = g.packed_causal_attention(q, k, v, c.n_heads, &segments)?;
            attentions.push(att);
            let o = g.matmul(att, params[li.wo])?;
            x = g.add(x, o)?;
            let m = g.layer_norm(x, params[li.ln2_g], params[li.ln2_b])?;
            let h = g.matmul(m, params[li.w1])?;
            let h = g.add_bias(h, params[li.b1])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, params[li.w2])?;
            let h = g.add_bias(h, params[li.b2])?;
            x = g.add(x, h)?;
        }
        let y = g.layer_norm(x, params[l.lnf_g], params[l.lnf_b])?;
        let logits = g.matmul(y, params[l.head])?;
        Ok(Built {
            logits,
            attentions,
            segments,
            params,
        })
    }

    /// Logits and attention maps for each input, computed in one packed pass.
    pub fn forward_batch(&self, inputs: &[Input<'_>]) -> Result<Vec<ForwardOutput>> {
        let mut g = Graph::new();
        let built = self.build(&mut g, inputs, false)?;
        let logits = g.value(built.logits);
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for (si, &t) in built.segments.iter().enumerate() {
            let rows = logits.data()[off * v..(off + t) * v].to_vec();
            let attentions = built
                .attentions
                .iter()
                .map(|&a| g.segment_attention_weights(a, si).expect("attention node"))
                .collect();
            out.push(ForwardOutput {
                logits: Tensor::new(vec![t, v], rows)?,
                attentions,
            });
            off += t;
        }
        Ok(out)
    }

    pub fn forward(&self, visual: Option<Visual<'_>>, ids: &[usize]) -> Result<ForwardOutput> {
        let mut out = self.forward_batch(&[Input { visual, ids }])?;
        Ok(out.pop().expect("one input"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            trainable: self.trainable,
            pretrained: self.pretrained,
            params: self
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in &self.params {
            for x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("wrong magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        let mut model = Self::new(header.config)?;
        if header.params.len() != model.params.len() {
            return Err(ModelError::Checkpoint("parameter list does not match config".into()));
        }
        let mut buf = [0u8; 8];
        for (meta, p) in header.params.iter().zip(model.params.iter_mut()) {
            if meta.name != p.name || meta.shape != p.value.shape() || meta.group != p.group {
                return Err(ModelError::Checkpoint(format!("unexpected parameter {}", meta.name)));
            }
            for x in p.value.data_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf)? != 0 {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        model.trainable = header.trainable;
        model.trainable[0] = false;
        model.pretrained = header.pretrained;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: MllmConfig,
    trainable: [bool; 3],
    #[serde(default)]
    pretrained: bool,
    params: Vec<ParamMeta>,
}

impl LogitModel for TinyMLLM {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn batch_logits(&self, inputs: &[Input<'_>]) -> Result<Vec<Tensor>> {
        Ok(self.forward_batch(inputs)?.into_iter().map(|o| o.logits).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 1,
            max_new_tokens: 512,
        }
    }
}

impl GenerateConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 1,
            max_new_tokens,
        }
    }

    pub fn beam(beam_width: usize, max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width,
            max_new_tokens,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Next-token logits with `<image>` ruled out: a generated slot token could
/// never be filled.
fn decodable(row: &[f64]) -> Vec<f64> {
    let mut r = row.to_vec();
    if let Some(x) = r.get_mut(IMAGE) {
        *x = f64::NEG_INFINITY;
    }
    r
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn budget(model: &impl LogitModel, prompt_len: usize, max_new: usize) -> Result<usize> {
    if prompt_len == 0 || prompt_len >= model.max_seq_len() {
        return Err(ModelError::SequenceTooLong {
            len: prompt_len,
            max: model.max_seq_len(),
        });
    }
    Ok(max_new.min(model.max_seq_len() - prompt_len))
}

/// Continues `prompt`; the returned tokens exclude the closing `<eos>` and
/// never contain `<image>`.
/// Generation also stops when the sequence reaches `max_seq_len`.
pub fn generate(
    model: &impl LogitModel,
    visual: Option<Visual<'_>>,
    prompt: &[usize],
    cfg: &GenerateConfig,
) -> Result<Vec<usize>> {
    match cfg.strategy {
        Strategy::Greedy => Ok(generate_greedy_batch(model, &[(visual, prompt)], cfg.max_new_tokens)?
            .pop()
            .expect("one prompt")),
        Strategy::Beam => beam_search(model, visual, prompt, cfg.beam_width, cfg.max_new_tokens),
    }
}

/// Greedy decoding of many prompts, advancing all unfinished ones together.
pub fn generate_greedy_batch(
    model: &impl LogitModel,
    prompts: &[(Option<Visual<'_>>, &[usize])],
    max_new: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.1.to_vec()).collect();
    let mut limits = Vec::with_capacity(prompts.len());
    for p in prompts {
        limits.push(budget(model, p.1.len(), max_new)?);
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| limits[i] > 0).collect();
    while !active.is_empty() {
        let inputs: Vec<Input<'_>> = active
            .iter()
            .map(|&i| Input {
                visual: prompts[i].0,
                ids: &seqs[i],
            })
            .collect();
        let logits = model.batch_logits(&inputs)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, l) in active.iter().zip(&logits) {
            let next = argmax(&decodable(l.row(l.rows() - 1)));
            if next == EOS {
                continue;
            }
            out[i].push(next);
            seqs[i].push(next);
            if out[i].len() < limits[i] {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

impl Hyp {
    /// Mean log-probability per generated token, counting `<eos>`.
    fn score(&self, closed: bool) -> f64 {
        let n = self.tokens.len() + usize::from(closed);
        if n == 0 {
            0.0
        } else {
            self.logp / n as f64
        }
    }
}

/// Length-normalized beam search. Candidates are ranked by total
/// log-probability during the search (ties to the lower token id) and by
/// mean log-probability when picking the final output.
pub fn beam_search(
    model: &impl LogitModel,
    visual: Option<Visual<'_>>,
    prompt: &[usize],
    width: usize,
    max_new: usize,
) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(ModelError::InvalidConfig("beam_width must be at least 1".into()));
    }
    let limit = budget(model, prompt.len(), max_new)?;
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut step = 0;
    while !alive.is_empty() && step < limit && finished.len() < width {
        let seqs: Vec<Vec<usize>> = alive
            .iter()
            .map(|h| prompt.iter().chain(&h.tokens).copied().collect())
            .collect();
        let inputs: Vec<Input<'_>> = seqs.iter().map(|s| Input { visual, ids: s }).collect();
        let logits = model.batch_logits(&inputs)?;
        // (hyp index, token, total logp)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, l) in logits.iter().enumerate() {
            let raw = decodable(l.row(l.rows() - 1));
            let lp = log_softmax(&raw);
            // rank on raw logits so width 1 reproduces greedy argmax exactly
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                cands.push((hi, tok, alive[hi].logp + lp[tok]));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(width);
        for (hi, tok, logp) in cands {
            if next.len() + finished.len() >= width {
                break;
            }
            let tokens = alive[hi].tokens.clone();
            if tok == EOS {
                finished.push(Hyp { tokens, logp });
            } else {
                let mut tokens = tokens;
                tokens.push(tok);
                next.push(Hyp { tokens, logp });
            }
        }
        alive = next;
        step += 1;
    }
    let best = finished
        .iter()
        .map(|h| (h, h.score(true)))
        .chain(alive.iter().map(|h| (h, h.score(false))))
        .fold(None::<(&Hyp, f64)>, |acc, (h, s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((h, s)),
        });
    Ok(best.map(|(h, _)| h.tokens.clone()).unwrap_or_default())
}
