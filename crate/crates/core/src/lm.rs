//! Decoder-only token language model over flattened RVQ codes.
//!
//! Codes are interleaved time-major: frame `t` contributes one token per
//! codebook, and codebook `i` owns the id range `i·K..(i+1)·K`. Special and
//! text tokens follow the code ids.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ssvc_autodiff::kernels::{gelu, softmax_in_place};
use ssvc_autodiff::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};

use crate::checkpoint::TensorTable;
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear, TransformerBlock};
use crate::rng::{domain, normal_tensor, rng_for, SeededRng};
use crate::rvq::CodeGrid;
use crate::synth::FeatureSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub nq: usize,
    pub codebook_size: usize,
    pub alphabet: usize,
}

impl Vocab {
    pub fn code(&self, stage: usize, code: u32) -> u32 {
        (stage * self.codebook_size) as u32 + code
    }

    fn special_base(&self) -> u32 {
        (self.nq * self.codebook_size) as u32
    }

    pub fn bos(&self) -> u32 {
        self.special_base()
    }

    pub fn eos(&self) -> u32 {
        self.special_base() + 1
    }

    pub fn sep(&self) -> u32 {
        self.special_base() + 2
    }

    /// Reserved second separator; no built-in prompt emits it.
    pub fn sep2(&self) -> u32 {
        self.special_base() + 3
    }

    /// Placeholder for an injected embedding.
    pub fn pad(&self) -> u32 {
        self.special_base() + 4
    }

    pub fn text(&self, symbol: usize) -> u32 {
        self.special_base() + 5 + symbol as u32
    }

    pub fn size(&self) -> usize {
        self.nq * self.codebook_size + 5 + self.alphabet
    }

    /// Codebook owning `token`, if it is a code token.
    pub fn stage_of(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (t < self.nq * self.codebook_size).then(|| t / self.codebook_size)
    }

    pub fn stage_range(&self, stage: usize) -> std::ops::Range<usize> {
        stage * self.codebook_size..(stage + 1) * self.codebook_size
    }
}

/// Interleaves a code grid into tokens `i·K + code`.
pub fn flatten_codes(grid: &CodeGrid, codebook_size: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(grid.frames * grid.nq);
    for t in 0..grid.frames {
        for (i, &c) in grid.row(t).iter().enumerate() {
            out.push((i * codebook_size) as u32 + c);
        }
    }
    out
}

/// Inverse of [`flatten_codes`]. A partial last frame is dropped.
pub fn unflatten_tokens(tokens: &[u32], nq: usize, codebook_size: usize) -> Result<CodeGrid> {
    let whole = tokens.len() - tokens.len() % nq;
    if whole != tokens.len() {
        log::warn!(
            "dropping {} trailing tokens of an incomplete frame",
            tokens.len() - whole
        );
    }
    let mut indices = Vec::with_capacity(whole);
    for (position, &token) in tokens[..whole].iter().enumerate() {
        let expected = position % nq;
        let lo = (expected * codebook_size) as u32;
        if token < lo || token >= lo + codebook_size as u32 {
            return Err(Error::CodebookMisalignment {
                position,
                token: token as usize,
                expected,
            });
        }
        indices.push(token - lo);
    }
    CodeGrid::new(whole / nq, nq, indices)
}

/// Inputs a prompt strategy may draw on.
#[derive(Clone, Copy, Debug, Default)]
pub struct PromptInput<'a> {
    pub text: &'a [usize],
    pub reference_text: Option<&'a [usize]>,
    pub reference_codes: Option<&'a CodeGrid>,
    pub reference_features: Option<&'a FeatureSequence>,
}

/// A token prefix, optionally with one slot whose embedding comes from the
/// reference encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub reference_slot: Option<usize>,
    pub reference: Option<FeatureSequence>,
    /// Code tokens already present at the end of the prefix.
    pub code_tokens: usize,
}

pub trait PromptStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn needs_reference_encoder(&self) -> bool {
        false
    }
    fn build(&self, input: &PromptInput, vocab: &Vocab) -> Result<Prompt>;
}

fn text_tokens(text: &[usize], vocab: &Vocab) -> Result<Vec<u32>> {
    if let Some(&s) = text.iter().find(|&&s| s >= vocab.alphabet) {
        return Err(invalid(format!("text symbol {s} outside alphabet of {}", vocab.alphabet)));
    }
    Ok(text.iter().map(|&s| vocab.text(s)).collect())
}

/// `[BOS] text [SEP]`
pub struct TextPrompt;

impl PromptStrategy for TextPrompt {
    fn name(&self) -> &'static str {
        "text"
    }

    fn build(&self, input: &PromptInput, vocab: &Vocab) -> Result<Prompt> {
        let mut tokens = vec![vocab.bos()];
        tokens.extend(text_tokens(input.text, vocab)?);
        tokens.push(vocab.sep());
        Ok(Prompt {
            tokens,
            reference_slot: None,
            reference: None,
            code_tokens: 0,
        })
    }
}

/// `[BOS] reference-text target-text [SEP] reference-codes`
pub struct SpeechPrompt;

impl PromptStrategy for SpeechPrompt {
    fn name(&self) -> &'static str {
        "speech"
    }

    fn build(&self, input: &PromptInput, vocab: &Vocab) -> Result<Prompt> {
        let (Some(ref_text), Some(codes)) = (input.reference_text, input.reference_codes) else {
            return Err(invalid("speech prompting needs a reference transcript and reference codes"));
        };
        if codes.nq != vocab.nq {
            return Err(invalid(format!("reference codes have {} stages, vocabulary {}", codes.nq, vocab.nq)));
        }
        let mut tokens = vec![vocab.bos()];
        tokens.extend(text_tokens(ref_text, vocab)?);
        tokens.extend(text_tokens(input.text, vocab)?);
        tokens.push(vocab.sep());
        let flat = flatten_codes(codes, vocab.codebook_size);
        let code_tokens = flat.len();
        tokens.extend(flat);
        Ok(Prompt {
            tokens,
            reference_slot: None,
            reference: None,
            code_tokens,
        })
    }
}

/// `[BOS] <reference embedding> text [SEP]`
pub struct TextReferencePrompt;

impl PromptStrategy for TextReferencePrompt {
    fn name(&self) -> &'static str {
        "text-ref"
    }

    fn needs_reference_encoder(&self) -> bool {
        true
    }

    fn build(&self, input: &PromptInput, vocab: &Vocab) -> Result<Prompt> {
        let Some(features) = input.reference_features else {
            return Err(invalid("text-ref prompting needs reference features"));
        };
        let mut tokens = vec![vocab.bos(), vocab.pad()];
        tokens.extend(text_tokens(input.text, vocab)?);
        tokens.push(vocab.sep());
        Ok(Prompt {
            tokens,
            reference_slot: Some(1),
            reference: Some(features.clone()),
            code_tokens: 0,
        })
    }
}

/// Prompt strategies selectable by name.
pub struct PromptRegistry {
    strategies: BTreeMap<&'static str, Box<dyn PromptStrategy>>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        let mut r = Self {
            strategies: BTreeMap::new(),
        };
        r.register(Box::new(TextPrompt));
        r.register(Box::new(SpeechPrompt));
        r.register(Box::new(TextReferencePrompt));
        r
    }
}

impl PromptRegistry {
    pub fn register(&mut self, strategy: Box<dyn PromptStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn PromptStrategy> {
        self.strategies.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            invalid(format!(
                "unknown prompt mode {name:?}; expected one of {}",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmVariant {
    /// No reference encoder.
    #[serde(rename = "nr")]
    NoReference,
    /// With a trainable reference encoder.
    #[serde(rename = "r")]
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub variant: LmVariant,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            ff_dim: 512,
            heads: 4,
            max_len: 512,
            variant: LmVariant::NoReference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub floor_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 10_000,
            peak_lr: 5e-4,
            total_steps: 120_000,
            floor_fraction: 0.10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.floor_fraction) {
            return Err(Error::Config("invalid peak_lr or floor_fraction".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, cosine decay to `floor_fraction·peak` at
/// `total_steps`, constant afterwards.
pub fn lr_schedule(step: u64, cfg: &ScheduleConfig) -> f64 {
    let floor = cfg.floor_fraction * cfg.peak_lr;
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if step >= cfg.total_steps {
        floor
    } else {
        let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Two convolutions and one self-attention layer, mean-pooled.
#[derive(Clone, Debug)]
struct ReferenceEncoder {
    conv1: Conv1d,
    conv2: Conv1d,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl ReferenceEncoder {
    fn new(store: &mut ParamStore, input_dim: usize, cfg: &LmConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            conv1: Conv1d::new(store, "ref.conv1", 3, input_dim, d, rng)?,
            conv2: Conv1d::new(store, "ref.conv2", 3, d, d, rng)?,
            q: Linear::new(store, "ref.q", d, d, rng)?,
            k: Linear::new(store, "ref.k", d, d, rng)?,
            v: Linear::new(store, "ref.v", d, d, rng)?,
            o: Linear::new(store, "ref.o", d, d, rng)?,
            heads: cfg.heads,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[usize]) -> Result<Var> {
        let h = self.conv1.forward(g, store, x, segments, false)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h, segments, false)?;
        let h = g.gelu(h);
        let q = self.q.forward(g, store, h, false)?;
        let k = self.k.forward(g, store, h, false)?;
        let v = self.v.forward(g, store, h, false)?;
        let a = g.attention(q, k, v, self.heads, segments, false)?;
        let a = self.o.forward(g, store, a, false)?;
        let h = g.add(h, a)?;
        Ok(g.segment_mean(h, segments)?)
    }
}

/// One sequence fed to the model: input tokens and an optional injected
/// reference embedding at `slot`.
#[derive(Clone, Debug)]
pub struct LmInput<'a> {
    pub tokens: &'a [u32],
    pub slot: Option<usize>,
    pub reference: Option<&'a FeatureSequence>,
}

pub struct TokenLm {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub input_dim: usize,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    head: Linear,
    reference: Option<ReferenceEncoder>,
    pub steps_trained: u64,
}

impl TokenLm {
    pub fn new(config: LmConfig, vocab: Vocab, input_dim: usize, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.model_dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                config.model_dim, config.heads
            )));
        }
        let mut rng = rng_for(seed, domain::LM_INIT);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let tok = store.add("lm.tok", normal_tensor(&mut rng, &[vocab.size(), d], 0.02))?;
        let pos = store.add("lm.pos", normal_tensor(&mut rng, &[config.max_len, d], 0.02))?;
        let blocks = (0..config.layers)
            .map(|i| TransformerBlock::new(&mut store, &format!("lm.block{i}"), d, config.ff_dim, config.heads, &mut rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(&mut store, "lm.ln_f", d)?;
        let head = Linear::new(&mut store, "lm.head", d, vocab.size(), &mut rng)?;
        let reference = match config.variant {
            LmVariant::Reference => Some(ReferenceEncoder::new(&mut store, input_dim, &config, &mut rng)?),
            LmVariant::NoReference => None,
        };
        Ok(Self {
            config,
            vocab,
            input_dim,
            store,
            tok,
            pos,
            blocks,
            ln_f,
            head,
            reference,
            steps_trained: 0,
        })
    }

    pub fn has_reference_encoder(&self) -> bool {
        self.reference.is_some()
    }

    /// Final hidden states for every input row, `Σlen×d`.
    pub fn hidden(&self, g: &mut Graph, inputs: &[LmInput]) -> Result<Var> {
        let d = self.config.model_dim;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.tokens.is_empty() {
                return Err(invalid("empty LM input"));
            }
            if inp.tokens.len() > self.config.max_len {
                return Err(invalid(format!(
                    "sequence of {} tokens exceeds max_len {}",
                    inp.tokens.len(),
                    self.config.max_len
                )));
            }
            if let Some(&t) = inp.tokens.iter().find(|&&t| t as usize >= self.vocab.size()) {
                return Err(invalid(format!("token {t} outside vocabulary of {}", self.vocab.size())));
            }
            ids.extend(inp.tokens.iter().map(|&t| t as usize));
            positions.extend(0..inp.tokens.len());
            segments.push(inp.tokens.len());
        }
        let table = g.param(&self.store, self.tok);
        let mut x = g.embedding(table, &ids)?;
        let slotted: Vec<(usize, &FeatureSequence)> = inputs
            .iter()
            .enumerate()
            .filter_map(|(i, inp)| inp.slot.map(|_| (i, inp.reference)))
            .map(|(i, r)| r.map(|r| (i, r)).ok_or_else(|| invalid("reference slot without features")))
            .collect::<Result<_>>()?;
        if !slotted.is_empty() {
            let enc = self
                .reference
                .as_ref()
                .ok_or_else(|| invalid("this model has no reference encoder"))?;
            let feats: Vec<f32> = slotted.iter().flat_map(|(_, f)| f.frames.data().iter().copied()).collect();
            let segs: Vec<usize> = slotted.iter().map(|(_, f)| f.len()).collect();
            let rows: usize = segs.iter().sum();
            let fv = g.constant(Tensor::matrix(rows, self.input_dim, feats)?);
            let emb = enc.forward(g, &self.store, fv, &segs)?;
            let total = ids.len();
            let all = g.concat_rows(&[x, emb])?;
            let mut order: Vec<usize> = (0..total).collect();
            let mut offset = 0;
            let mut k = 0;
            for (i, inp) in inputs.iter().enumerate() {
                if let Some(slot) = inp.slot {
                    if slot >= inp.tokens.len() {
                        return Err(invalid("reference slot outside the sequence"));
                    }
                    debug_assert_eq!(slotted[k].0, i);
                    order[offset + slot] = total + k;
                    k += 1;
                }
                offset += inp.tokens.len();
            }
            x = g.index_rows(all, &order)?;
        }
        let pos_table = g.param(&self.store, self.pos);
        let p = g.embedding(pos_table, &positions)?;
        let mut h = g.add(x, p)?;
        for b in &self.blocks {
            h = b.forward(g, &self.store, h, &segments, true, false)?;
        }
        let h = self.ln_f.forward(g, &self.store, h, false)?;
        debug_assert_eq!(g.shape(h), &[ids.len(), d]);
        Ok(h)
    }

    /// Next-token logits for every position of one sequence.
    pub fn forward(&self, input: &LmInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.hidden(&mut g, std::slice::from_ref(input))?;
        let logits = self.head.forward(&mut g, &self.store, h, false)?;
        Ok(g.value(logits).clone())
    }

    pub fn logits_for_rows(&self, g: &mut Graph, hidden: Var, rows: &[usize]) -> Result<Var> {
        let h = g.index_rows(hidden, rows)?;
        self.head.forward(g, &self.store, h, false)
    }

    pub fn reference_embedding(&self, features: &FeatureSequence) -> Result<Vec<f32>> {
        let enc = self
            .reference
            .as_ref()
            .ok_or_else(|| invalid("this model has no reference encoder"))?;
        let mut g = Graph::new();
        let x = g.constant(features.frames.clone());
        let e = enc.forward(&mut g, &self.store, x, &[features.len()])?;
        Ok(g.value(e).data().to_vec())
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        for (name, v) in self.store.iter() {
            t.insert(format!("param.{name}"), v.clone());
        }
        t.insert("meta.steps_trained", Tensor::scalar(self.steps_trained as f32));
        t
    }

    pub fn from_table(config: LmConfig, vocab: Vocab, input_dim: usize, table: &TensorTable) -> Result<Self> {
        let mut lm = Self::new(config, vocab, input_dim, 0)?;
        let ids: Vec<ParamId> = lm.store.ids().collect();
        for id in ids {
            let name = format!("param.{}", lm.store.name(id));
            let shape = lm.store.get(id).shape().to_vec();
            let v = table.require_shape(&name, &shape)?.clone();
            lm.store.set(id, v)?;
        }
        lm.steps_trained = table.require_shape("meta.steps_trained", &[])?.item() as u64;
        Ok(lm)
    }
}

/// Incremental decoder with per-layer key/value caches. Computes the same
/// function as [`TokenLm::forward`], one position at a time.
pub struct Session<'a> {
    lm: &'a TokenLm,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'a> Session<'a> {
    pub fn new(lm: &'a TokenLm) -> Self {
        Self {
            lm,
            keys: vec![Vec::new(); lm.config.layers],
            values: vec![Vec::new(); lm.config.layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_token(&mut self, token: u32) -> Result<Vec<f32>> {
        if token as usize >= self.lm.vocab.size() {
            return Err(invalid(format!("token {token} outside vocabulary")));
        }
        let emb = self.lm.store.get(self.lm.tok).row(token as usize).to_vec();
        self.push_embedding(emb)
    }

    /// Appends one position given its input embedding and returns the
    /// next-token logits.
    pub fn push_embedding(&mut self, mut x: Vec<f32>) -> Result<Vec<f32>> {
        let lm = self.lm;
        let d = lm.config.model_dim;
        if self.len >= lm.config.max_len {
            return Err(invalid(format!("sequence exceeds max_len {}", lm.config.max_len)));
        }
        for (v, p) in x.iter_mut().zip(lm.store.get(lm.pos).row(self.len)) {
            *v += p;
        }
        let heads = lm.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let n = self.len + 1;
        for (l, b) in lm.blocks.iter().enumerate() {
            let mut h = x.clone();
            b.ln1.apply(&lm.store, &mut h, d);
            let q = b.q.apply(&lm.store, &h, 1);
            self.keys[l].extend(b.k.apply(&lm.store, &h, 1));
            self.values[l].extend(b.v.apply(&lm.store, &h, 1));
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0; d];
            let mut p = vec![0.0; n];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = q[cols.clone()]
                        .iter()
                        .zip(&ks[j * d + hd * dh..j * d + (hd + 1) * dh])
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                        * scale;
                }
                softmax_in_place(&mut p);
                for (j, pj) in p.iter().enumerate() {
                    for (o, v) in att[cols.clone()].iter_mut().zip(&vs[j * d + hd * dh..j * d + (hd + 1) * dh]) {
                        *o += pj * v;
                    }
                }
            }
            let a = b.o.apply(&lm.store, &att, 1);
            x.iter_mut().zip(&a).for_each(|(v, a)| *v += a);
            let mut h = x.clone();
            b.ln2.apply(&lm.store, &mut h, d);
            let mut f = b.ff1.apply(&lm.store, &h, 1);
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let f = b.ff2.apply(&lm.store, &f, 1);
            x.iter_mut().zip(&f).for_each(|(v, a)| *v += a);
        }
        lm.ln_f.apply(&lm.store, &mut x, d);
        self.len += 1;
        Ok(lm.head.apply(&lm.store, &x, 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f32,
    /// Zero keeps every allowed token.
    pub top_k: usize,
    pub max_new: usize,
}

/// Generated code tokens, without the prompt or the final EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub stopped: bool,
}

impl TokenLm {
    /// Feeds a prompt through a fresh session, returning the session and
    /// the logits after its last token.
    pub fn prefill(&self, prompt: &Prompt) -> Result<(Session<'_>, Vec<f32>)> {
        let mut s = Session::new(self);
        let mut logits = Vec::new();
        for (i, &t) in prompt.tokens.iter().enumerate() {
            logits = if prompt.reference_slot == Some(i) {
                let f = prompt
                    .reference
                    .as_ref()
                    .ok_or_else(|| invalid("reference slot without features"))?;
                s.push_embedding(self.reference_embedding(f)?)?
            } else {
                s.push_token(t)?
            };
        }
        Ok((s, logits))
    }

    /// Autoregressive sampling restricted, at every position, to the
    /// expected codebook's tokens and EOS.
    pub fn sample(&self, prompt: &Prompt, cfg: &SamplingConfig, seed: u64) -> Result<Generation> {
        let mut rng = rng_for(seed, domain::SAMPLE);
        let (mut session, mut logits) = self.prefill(prompt)?;
        let room = self.config.max_len.saturating_sub(prompt.tokens.len());
        let max_new = cfg.max_new.min(room);
        let mut out = Vec::new();
        let eos = self.vocab.eos() as usize;
        for step in 0..max_new {
            let stage = (prompt.code_tokens + step) % self.vocab.nq;
            let mut allowed: Vec<usize> = self.vocab.stage_range(stage).collect();
            allowed.push(eos);
            let pick = choose(&logits, &allowed, cfg, &mut rng);
            if pick == eos {
                return Ok(Generation { tokens: out, stopped: true });
            }
            out.push(pick as u32);
            if step + 1 < max_new {
                logits = session.push_token(pick as u32)?;
            }
        }
        Ok(Generation { tokens: out, stopped: false })
    }
}

fn choose(logits: &[f32], allowed: &[usize], cfg: &SamplingConfig, rng: &mut SeededRng) -> usize {
    let greedy = cfg.top_k == 1 || cfg.temperature <= 1e-6;
    if greedy {
        return *allowed
            .iter()
            .fold(None, |best: Option<&usize>, i| match best {
                Some(b) if logits[*b] >= logits[*i] => Some(b),
                _ => Some(i),
            })
            .unwrap();
    }
    let mut cand: Vec<(usize, f32)> = allowed.iter().map(|&i| (i, logits[i] / cfg.temperature)).collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if cfg.top_k > 0 {
        cand.truncate(cfg.top_k);
    }
    let mut p: Vec<f32> = cand.iter().map(|c| c.1).collect();
    softmax_in_place(&mut p);
    let u: f32 = rng.gen();
    let mut acc = 0.0;
    for (c, pi) in cand.iter().zip(&p) {
        acc += pi;
        if u < acc {
            return c.0;
        }
    }
    cand.last().unwrap().0
}

/// One utterance of the code corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeUtterance {
    pub index: usize,
    pub speaker_id: u32,
    pub content: Vec<usize>,
    pub codes: CodeGrid,
}

pub fn code_corpus_to_table(items: &[CodeUtterance]) -> TensorTable {
    let mut t = TensorTable::new();
    for u in items {
        let p = format!("utt{}", u.index);
        t.insert(format!("{p}.speaker"), Tensor::scalar(u.speaker_id as f32));
        t.insert(format!("{p}.content"), Tensor::vector(u.content.iter().map(|&s| s as f32).collect()));
        let codes = Tensor::new(vec![u.codes.frames, u.codes.nq], u.codes.indices.iter().map(|&c| c as f32).collect())
            .expect("grid shape");
        t.insert(format!("{p}.codes"), codes);
    }
    t
}

pub fn code_corpus_from_table(table: &TensorTable) -> Result<Vec<CodeUtterance>> {
    let mut out = Vec::new();
    for (name, tensor) in table.iter() {
        let Some(p) = name.strip_suffix(".codes") else { continue };
        let index: usize = p
            .strip_prefix("utt")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| invalid(format!("bad code corpus entry {name:?}")))?;
        let speaker = table.require_shape(&format!("{p}.speaker"), &[])?.item() as u32;
        let content = table.require(&format!("{p}.content"))?.data().iter().map(|&v| v as usize).collect();
        if tensor.rank() != 2 {
            return Err(invalid(format!("{name} is not a grid")));
        }
        let (frames, nq) = (tensor.shape()[0], tensor.shape()[1]);
        let codes = CodeGrid::new(frames, nq, tensor.data().iter().map(|&v| v as u32).collect())?;
        out.push(CodeUtterance {
            index,
            speaker_id: speaker,
            content,
            codes,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub batch_tokens: usize,
    pub schedule: ScheduleConfig,
    /// Share of training sequences built with speech prompting.
    pub speech_fraction: f32,
    /// Longest reference transcript used for speech prompting.
    pub reference_max_symbols: usize,
    pub weight_decay: f32,
    pub log_every: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 120_000,
            batch_tokens: 3200,
            schedule: ScheduleConfig::default(),
            speech_fraction: 0.5,
            reference_max_symbols: 6,
            weight_decay: 0.01,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmLogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub tokens: usize,
}

/// A training sequence: full token list and the index of the first
/// position whose next token is a target.
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub first_target: usize,
    pub slot: Option<usize>,
    pub reference: Option<FeatureSequence>,
}

/// Builds `prompt ++ codes ++ [EOS]` for an utterance.
pub fn training_sequence(prompt: Prompt, codes: &CodeGrid, vocab: &Vocab) -> TrainingSequence {
    let first_target = prompt.tokens.len() - 1;
    let mut tokens = prompt.tokens;
    tokens.extend(flatten_codes(codes, vocab.codebook_size));
    tokens.push(vocab.eos());
    TrainingSequence {
        tokens,
        first_target,
        slot: prompt.reference_slot,
        reference: prompt.reference,
    }
}

/// Mean next-token cross entropy over target positions of a batch.
pub fn sequence_loss(lm: &TokenLm, g: &mut Graph, batch: &[TrainingSequence]) -> Result<Var> {
    let inputs: Vec<LmInput> = batch
        .iter()
        .map(|s| LmInput {
            tokens: &s.tokens[..s.tokens.len() - 1],
            slot: s.slot,
            reference: s.reference.as_ref(),
        })
        .collect();
    let h = lm.hidden(g, &inputs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in batch {
        let n = s.tokens.len() - 1;
        for j in s.first_target..n {
            rows.push(offset + j);
            targets.push(s.tokens[j + 1] as usize);
        }
        offset += n;
    }
    let logits = lm.logits_for_rows(g, h, &rows)?;
    Ok(g.cross_entropy_logits(logits, &targets)?)
}

/// Builds one training sequence for `item`, choosing speech prompting with
/// probability `speech_fraction` when another utterance of the speaker is
/// available.
fn draw_sequence(
    lm: &TokenLm,
    items: &[CodeUtterance],
    by_speaker: &BTreeMap<u32, Vec<usize>>,
    item: usize,
    corpus: Option<&Corpus>,
    speech_fraction: f32,
    reference_max_symbols: usize,
    rng: &mut SeededRng,
) -> Result<TrainingSequence> {
    let u = &items[item];
    let registry = PromptRegistry::default();
    let partners: Vec<usize> = by_speaker[&u.speaker_id].iter().copied().filter(|&j| j != item && items[j].content.len() <= reference_max_symbols)
        .collect();
    let use_speech = speech_fraction > 0.0 && !partners.is_empty() && rng.gen::<f32>() < speech_fraction;
    let prompt = if use_speech {
        let r = &items[*partners.choose(rng).unwrap()];
        registry.get("speech")?.build(
            &PromptInput {
                text: &u.content,
                reference_text: Some(&r.content),
                reference_codes: Some(&r.codes),
                reference_features: None,
            },
            &lm.vocab,
        )?
    } else if lm.has_reference_encoder() {
        let corpus = corpus.ok_or_else(|| invalid("reference variant needs the corpus for reference features"))?;
        let features = corpus.utterance(u.index).0;
        registry.get("text-ref")?.build(
            &PromptInput {
                text: &u.content,
                reference_features: Some(&features),
                ..PromptInput::default()
            },
            &lm.vocab,
        )?
    } else {
        registry.get("text")?.build(
            &PromptInput {
                text: &u.content,
                ..PromptInput::default()
            },
            &lm.vocab,
        )?
    };
    let seq = training_sequence(prompt, &u.codes, &lm.vocab);
    if seq.tokens.len() - 1 > lm.config.max_len {
        // fall back to a plain prompt rather than truncating targets
        if use_speech {
            return draw_sequence(lm, items, by_speaker, item, corpus, 0.0, 0, rng);
        }
        return Err(invalid(format!(
            "utterance {} needs {} positions, max_len is {}",
            u.index,
            seq.tokens.len() - 1,
            lm.config.max_len
        )));
    }
    Ok(seq)
}

pub fn train_lm(
    items: &[CodeUtterance],
    corpus: Option<&Corpus>,
    config: &LmConfig,
    vocab: Vocab,
    input_dim: usize,
    train: &LmTrainConfig,
    seed: u64,
    mut log: impl FnMut(&LmLogRecord),
) -> Result<TokenLm> {
    if items.is_empty() {
        return Err(invalid("code corpus is empty"));
    }
    train.schedule.validate()?;
    let mut lm = TokenLm::new(config.clone(), vocab, input_dim, seed)?;
    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, u) in items.iter().enumerate() {
        by_speaker.entry(u.speaker_id).or_default().push(i);
    }
    let mut rng = rng_for(seed, domain::LM_TRAIN);
    let opt_cfg = AdamWConfig {
        lr: 0.0,
        beta1: 0.9,
        beta2: 0.95,
        weight_decay: train.weight_decay,
        eps: 1e-8,
    };
    let ids: Vec<ParamId> = lm.store.ids().collect();
    let mut opt = AdamW::new(opt_cfg, &lm.store, ids);
    for step in 0..train.steps {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < train.batch_tokens.max(1) {
            let item = rng.gen_range(0..items.len());
            let seq = draw_sequence(
                &lm,
                items,
                &by_speaker,
                item,
                corpus,
                train.speech_fraction,
                train.reference_max_symbols,
                &mut rng,
            )?;
            tokens += seq.tokens.len() - 1 - seq.first_target;
            batch.push(seq);
        }
        let lr = lr_schedule(step, &train.schedule);
        opt.set_lr(lr as f32);
        let mut g = Graph::new();
        let loss = sequence_loss(&lm, &mut g, &batch)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.for_params(&lm.store);
        opt.step(&mut lm.store, &grads)?;
        lm.steps_trained += 1;
        if step % train.log_every.max(1) == 0 || step + 1 == train.steps {
            log(&LmLogRecord {
                step,
                lr,
                loss: value,
                tokens,
            });
        }
    }
    Ok(lm)
}
