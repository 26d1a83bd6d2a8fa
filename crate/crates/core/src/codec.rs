//! The speaker-disentangled codec.
//!
//! Encoder layers are mixed twice with complementary weights: the speaker
//! branch uses `softmax(W_s)`, the non-speaker branch `1 − softmax(W_s)`.
//! A CLS transformer turns speaker features into a unit embedding; the
//! non-speaker features are residual-quantized and decoded together with
//! the embedding.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ssvc_autodiff::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var};

use crate::checkpoint::TensorTable;
use crate::corpus::Corpus;
use crate::encoder::{EncoderConfig, FrozenEncoder, LayerStack};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv1d, LayerNorm, Linear, TransformerBlock};
use crate::rng::{domain, rng_for, SeededRng};
use crate::rvq::{CodeGrid, Quantized, Rvq, RvqConfig};
use crate::synth::{chunk_pair, FeatureSequence};

const TEMPERATURE_MIN: f32 = 1e-3;
const TEMPERATURE_MAX: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda0: f32,
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 1.0 / 301.0,
            lambda1: 100.0 / 301.0,
            lambda2: 100.0 / 301.0,
            lambda3: 100.0 / 301.0,
        }
    }
}

impl LossWeights {
    pub fn sum(&self) -> f32 {
        self.lambda0 + self.lambda1 + self.lambda2 + self.lambda3
    }

    /// Rescales the weights to sum to one.
    pub fn normalized(&self) -> Result<Self> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {all:?}")));
        }
        let s = self.sum();
        if s <= 0.0 {
            return Err(Error::Config("loss weights sum to zero".into()));
        }
        Ok(Self {
            lambda0: self.lambda0 / s,
            lambda1: self.lambda1 / s,
            lambda2: self.lambda2 / s,
            lambda3: self.lambda3 / s,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub encoder: EncoderConfig,
    pub speaker_dim: usize,
    pub extractor_layers: usize,
    pub extractor_heads: usize,
    pub extractor_ff: usize,
    pub nq: usize,
    pub codebook_size: usize,
    pub decoder_hidden: usize,
    pub weights: LossWeights,
    pub lr: f32,
    pub batch: usize,
    pub chunk_len: usize,
    pub steps: usize,
    pub log_every: usize,
    pub ema_decay: f32,
    pub dead_threshold: f32,
    pub dead_patience: u32,
    pub temperature_init: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            speaker_dim: 16,
            extractor_layers: 2,
            extractor_heads: 2,
            extractor_ff: 64,
            nq: 4,
            codebook_size: 512,
            decoder_hidden: 64,
            weights: LossWeights::default(),
            lr: 1e-4,
            batch: 16,
            chunk_len: 8,
            steps: 2000,
            log_every: 50,
            ema_decay: 0.99,
            dead_threshold: 1.0,
            dead_patience: 100,
            temperature_init: 0.07,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Speaker,
    NonSpeaker,
}

/// CLS transformer over speaker features, without positional encodings.
#[derive(Clone, Debug)]
pub struct SpeakerExtractor {
    input: Linear,
    cls: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    out: Linear,
}

impl SpeakerExtractor {
    fn new(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut SeededRng) -> Result<Self> {
        let d = cfg.encoder.dim;
        Ok(Self {
            input: Linear::new(store, "extractor.input", d, d, rng)?,
            cls: store.add("extractor.cls", crate::rng::normal_tensor(rng, &[1, d], 0.5))?,
            blocks: (0..cfg.extractor_layers)
                .map(|i| {
                    TransformerBlock::new(
                        store,
                        &format!("extractor.block{i}"),
                        d,
                        cfg.extractor_ff,
                        cfg.extractor_heads,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(store, "extractor.ln", d)?,
            out: Linear::new(store, "extractor.out", d, cfg.speaker_dim, rng)?,
        })
    }

    /// One unit embedding per segment of `x` (`ΣT×D`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[usize], frozen: bool) -> Result<Var> {
        let h = self.input.forward(g, store, x, frozen)?;
        let cls = if frozen {
            g.frozen_param(store, self.cls)
        } else {
            g.param(store, self.cls)
        };
        let all = g.concat_rows(&[cls, h])?;
        let mut order = Vec::with_capacity(g.shape(all)[0] + segments.len());
        let mut cls_rows = Vec::with_capacity(segments.len());
        let mut start = 0;
        for &len in segments {
            cls_rows.push(order.len());
            order.push(0);
            order.extend(start + 1..start + len + 1);
            start += len;
        }
        let mut x = g.index_rows(all, &order)?;
        let with_cls: Vec<usize> = segments.iter().map(|l| l + 1).collect();
        for b in &self.blocks {
            x = b.forward(g, store, x, &with_cls, false, frozen)?;
        }
        let x = self.ln.forward(g, store, x, frozen)?;
        let c = g.index_rows(x, &cls_rows)?;
        let o = self.out.forward(g, store, c, frozen)?;
        Ok(g.normalize_rows(o)?)
    }
}

/// MLP with two temporal convolutions in the middle.
#[derive(Clone, Debug)]
struct Decoder {
    inp: Linear,
    conv1: Conv1d,
    conv2: Conv1d,
    out: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &CodecConfig, out_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let h = cfg.decoder_hidden;
        Ok(Self {
            inp: Linear::new(store, "decoder.in", cfg.encoder.dim + cfg.speaker_dim, h, rng)?,
            conv1: Conv1d::new(store, "decoder.conv1", 3, h, h, rng)?,
            conv2: Conv1d::new(store, "decoder.conv2", 3, h, h, rng)?,
            out: Linear::new(store, "decoder.out", h, out_dim, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[usize]) -> Result<Var> {
        let h = self.inp.forward(g, store, x, false)?;
        let h = g.gelu(h);
        let h = self.conv1.forward(g, store, h, segments, false)?;
        let h = g.gelu(h);
        let h = self.conv2.forward(g, store, h, segments, false)?;
        let h = g.gelu(h);
        self.out.forward(g, store, h, false)
    }
}

/// The four terms of the generator loss and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f32,
    pub contrastive: f32,
    pub disentangle: f32,
    pub commitment: f32,
    pub total: f32,
}

impl LossBreakdown {
    pub fn compose(weights: &LossWeights, recon: f32, contrastive: f32, disentangle: f32, commitment: f32) -> Self {
        Self {
            recon,
            contrastive,
            disentangle,
            commitment,
            total: weights.lambda0 * recon + weights.lambda1 * contrastive - weights.lambda2 * disentangle
                + weights.lambda3 * commitment,
        }
    }
}

/// One training example: the full utterance and two crops.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub features: FeatureSequence,
    pub stack: LayerStack,
    pub chunk_a: LayerStack,
    pub chunk_b: LayerStack,
}

/// Graph handles produced by [`Codec::loss_graph`].
pub struct LossVars {
    pub recon: Var,
    pub contrastive: Var,
    pub disentangle: Var,
    pub commitment: Var,
    /// Weighted objective with the minus sign before the disentangle term.
    pub total: Var,
    /// What is differentiated: the disentangle term enters with a plus sign
    /// and reaches the layer logits through gradient reversal.
    pub objective: Var,
    pub similarity: Var,
    pub non_speaker: Var,
    pub quantized: Quantized,
    pub reconstruction: Var,
}

pub struct Codec {
    pub config: CodecConfig,
    pub encoder: FrozenEncoder,
    pub store: ParamStore,
    pub rvq: Rvq,
    layer_logits: ParamId,
    log_temperature: ParamId,
    extractor: SpeakerExtractor,
    decoder: Decoder,
    /// Number of optimizer steps taken.
    pub steps_trained: u64,
}

impl Codec {
    pub fn new(corpus_seed: u64, input_dim: usize, config: CodecConfig, init_seed: u64) -> Result<Self> {
        validate(&config)?;
        let mut config = config;
        config.weights = config.weights.normalized()?;
        let mut rng = rng_for(init_seed, domain::CODEC_INIT);
        let mut store = ParamStore::new();
        let layer_logits = store.add("layers.w_s", Tensor::zeros(&[config.encoder.layers]))?;
        let log_temperature = store.add("contrastive.log_temperature", Tensor::scalar(config.temperature_init.ln()))?;
        let extractor = SpeakerExtractor::new(&mut store, &config, &mut rng)?;
        let decoder = Decoder::new(&mut store, &config, input_dim, &mut rng)?;
        let rvq = Rvq::new(
            RvqConfig {
                nq: config.nq,
                codebook_size: config.codebook_size,
                dim: config.encoder.dim,
                decay: config.ema_decay,
                dead_threshold: config.dead_threshold,
                dead_patience: config.dead_patience,
            },
            &mut rng,
        );
        Ok(Self {
            encoder: FrozenEncoder::new(corpus_seed, input_dim, config.encoder),
            config,
            store,
            rvq,
            layer_logits,
            log_temperature,
            extractor,
            decoder,
            steps_trained: 0,
        })
    }

    pub fn layer_logits_id(&self) -> ParamId {
        self.layer_logits
    }

    pub fn extractor_param_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("extractor.").collect()
    }

    pub fn temperature(&self) -> f32 {
        self.store.get(self.log_temperature).item().exp()
    }

    /// `(speaker, non-speaker)` per-layer mixture weights.
    pub fn layer_weights(&self) -> (Vec<f32>, Vec<f32>) {
        layer_weights(self.store.get(self.layer_logits).data())
    }

    pub fn encode_layers(&self, f: &FeatureSequence) -> LayerStack {
        self.encoder.encode_layers(f)
    }

    /// Weighted sum of layers for `branch`, as a graph node.
    pub fn layer_mix(&self, g: &mut Graph, stack: &LayerStack, branch: Branch) -> Result<Var> {
        let logits = g.param(&self.store, self.layer_logits);
        let logits = g.reshape(logits, &[1, stack.layers])?;
        let sm = g.softmax(logits, 1)?;
        let w = match branch {
            Branch::Speaker => sm,
            Branch::NonSpeaker => g.affine(sm, -1.0, 1.0),
        };
        let m = g.constant(stack.as_matrix());
        let mixed = g.matmul(w, m)?;
        Ok(g.reshape(mixed, &[stack.frames, stack.dim])?)
    }

    pub fn speaker_embedding_var(&self, g: &mut Graph, stacks: &[&LayerStack], frozen: bool) -> Result<Var> {
        let joined = LayerStack::concat(stacks);
        let segments: Vec<usize> = stacks.iter().map(|s| s.frames).collect();
        let x = self.layer_mix(g, &joined, Branch::Speaker)?;
        self.extractor.forward(g, &self.store, x, &segments, frozen)
    }

    /// Unit speaker embedding of one utterance.
    pub fn speaker_embed(&self, f: &FeatureSequence) -> Result<Vec<f32>> {
        self.speaker_embed_stack(&self.encode_layers(f))
    }

    pub fn speaker_embed_stack(&self, stack: &LayerStack) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let s = self.speaker_embedding_var(&mut g, &[stack], true)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Embeds a list of feature matrices that are already speaker-mixed
    /// (used by the disentangle term and tests).
    pub fn extractor_forward(&self, g: &mut Graph, x: Var, segments: &[usize], frozen: bool) -> Result<Var> {
        self.extractor.forward(g, &self.store, x, segments, frozen)
    }

    /// Pre-quantization non-speaker features, `T×D`.
    pub fn non_speaker(&self, stack: &LayerStack) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let c = self.layer_mix(&mut g, stack, Branch::NonSpeaker)?;
        Ok(g.value(c).data().to_vec())
    }

    pub fn encode(&self, f: &FeatureSequence) -> Result<(CodeGrid, Vec<f32>)> {
        let stack = self.encode_layers(f);
        let c = self.non_speaker(&stack)?;
        let q = self.rvq.quantize(&c, stack.frames)?;
        Ok((q.codes, self.speaker_embed_stack(&stack)?))
    }

    pub fn dequantize(&self, grid: &CodeGrid) -> Result<Vec<f32>> {
        self.rvq.dequantize(grid)
    }

    /// Decodes quantized non-speaker features with a speaker embedding.
    pub fn decode(&self, c_hat: &[f32], speaker: &[f32]) -> Result<FeatureSequence> {
        let d = self.config.encoder.dim;
        if c_hat.len() % d != 0 || speaker.len() != self.config.speaker_dim {
            return Err(invalid(format!(
                "decode expects T×{d} features and a {}-dim embedding",
                self.config.speaker_dim
            )));
        }
        let t = c_hat.len() / d;
        if t == 0 {
            return Err(invalid("cannot decode zero frames"));
        }
        let mut g = Graph::new();
        let c = g.constant(Tensor::matrix(t, d, c_hat.to_vec())?);
        let s = g.constant(Tensor::matrix(1, speaker.len(), speaker.to_vec())?);
        let s = g.repeat_rows(s, &[t])?;
        let x = g.concat_cols(&[c, s])?;
        let y = self.decoder.forward(&mut g, &self.store, x, &[t])?;
        FeatureSequence::new(g.value(y).clone())
    }

    pub fn decode_codes(&self, grid: &CodeGrid, speaker: &[f32]) -> Result<FeatureSequence> {
        self.decode(&self.dequantize(grid)?, speaker)
    }

    pub fn reconstruct(&self, f: &FeatureSequence) -> Result<FeatureSequence> {
        self.convert_voice(f, f)
    }

    /// Source content and prosody with the target's voice.
    pub fn convert_voice(&self, source: &FeatureSequence, target: &FeatureSequence) -> Result<FeatureSequence> {
        self.require_trained()?;
        let (codes, _) = self.encode(source)?;
        let s = self.speaker_embed(target)?;
        self.decode_codes(&codes, &s)
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.steps_trained == 0 {
            return Err(Error::ModelNotReady("codec has not been trained".into()));
        }
        Ok(())
    }

    /// Builds the full generator loss for a batch.
    pub fn loss_graph(&self, g: &mut Graph, batch: &[BatchItem]) -> Result<LossVars> {
        if batch.len() < 2 {
            return Err(invalid("a batch needs at least two utterances"));
        }
        let w = self.config.weights;
        let n = batch.len();
        let stacks: Vec<&LayerStack> = batch.iter().map(|b| &b.stack).collect();
        let segments: Vec<usize> = stacks.iter().map(|s| s.frames).collect();
        let rows: usize = segments.iter().sum();
        let joined = LayerStack::concat(&stacks);

        // contrastive term on chunk pairs
        let a: Vec<&LayerStack> = batch.iter().map(|b| &b.chunk_a).collect();
        let b: Vec<&LayerStack> = batch.iter().map(|b| &b.chunk_b).collect();
        let emb_a = self.speaker_embedding_var(g, &a, false)?;
        let emb_b = self.speaker_embedding_var(g, &b, false)?;
        let emb_bt = g.transpose(emb_b);
        let sim = g.matmul(emb_a, emb_bt)?;
        let log_t = g.param(&self.store, self.log_temperature);
        let neg_log_t = g.neg(log_t);
        let inv_t = g.exp(neg_log_t);
        let sim = g.mul_scalar_var(sim, inv_t)?;
        let contrastive = contrastive_from_similarity(g, sim)?;

        // speaker embedding of the whole utterance, used by the decoder
        let spk = self.layer_mix(g, &joined, Branch::Speaker)?;
        let s_full = self.extractor.forward(g, &self.store, spk, &segments, false)?;

        // disentangle term: only the layer logits see its (reversed) gradient
        let c = self.layer_mix(g, &joined, Branch::NonSpeaker)?;
        let s_s = g.stop_gradient(s_full);
        let c_rev = g.gradient_reversal(c, 1.0);
        let s_ns = self.extractor.forward(g, &self.store, c_rev, &segments, true)?;
        let disentangle = disentangle_rows(g, s_s, s_ns)?;

        // quantization with a straight-through estimator
        let c_val = g.value(c).data().to_vec();
        let quantized = self.rvq.quantize(&c_val, rows)?;
        let shift: Vec<f32> = quantized.values.iter().zip(&c_val).map(|(q, c)| q - c).collect();
        let shift = g.constant(Tensor::matrix(rows, self.config.encoder.dim, shift)?);
        let c_q = g.add(c, shift)?;
        let target = g.constant(Tensor::matrix(rows, self.config.encoder.dim, quantized.values.clone())?);
        let commit = g.mse(c, target)?;
        let commitment = g.scale(commit, self.config.encoder.dim as f32);

        let s_rep = g.repeat_rows(s_full, &segments)?;
        let dec_in = g.concat_cols(&[c_q, s_rep])?;
        let reconstruction = self.decoder.forward(g, &self.store, dec_in, &segments)?;
        let frames: Vec<f32> = batch.iter().flat_map(|b| b.features.frames.data().iter().copied()).collect();
        let frames = g.constant(Tensor::matrix(rows, batch[0].features.dim(), frames)?);
        let recon = g.mse(reconstruction, frames)?;

        let r = g.scale(recon, w.lambda0);
        let ct = g.scale(contrastive, w.lambda1);
        let cm = g.scale(commitment, w.lambda3);
        let base = g.add(r, ct)?;
        let base = g.add(base, cm)?;
        let d_plus = g.scale(disentangle, w.lambda2);
        let d_minus = g.scale(disentangle, -w.lambda2);
        let objective = g.add(base, d_plus)?;
        let total = g.add(base, d_minus)?;
        debug_assert_eq!(n, g.shape(sim)[0]);
        Ok(LossVars {
            recon,
            contrastive,
            disentangle,
            commitment,
            total,
            objective,
            similarity: sim,
            non_speaker: c,
            quantized,
            reconstruction,
        })
    }

    pub fn breakdown(g: &Graph, vars: &LossVars) -> LossBreakdown {
        LossBreakdown {
            recon: g.value(vars.recon).item(),
            contrastive: g.value(vars.contrastive).item(),
            disentangle: g.value(vars.disentangle).item(),
            commitment: g.value(vars.commitment).item(),
            total: g.value(vars.total).item(),
        }
    }

    pub fn make_item(&self, features: FeatureSequence, chunk_seed: u64) -> Result<BatchItem> {
        let len = self.config.chunk_len.min(features.len());
        let (a, b) = chunk_pair(&features, len, chunk_seed)?;
        Ok(BatchItem {
            stack: self.encode_layers(&features),
            chunk_a: self.encode_layers(&a),
            chunk_b: self.encode_layers(&b),
            features,
        })
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.store.get_mut(self.log_temperature);
        let v = t.data_mut();
        v[0] = v[0].clamp(TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    }

    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        for (name, v) in self.store.iter() {
            t.insert(format!("param.{name}"), v.clone());
        }
        let k = self.config.codebook_size;
        for stage in 0..self.config.nq {
            t.insert(format!("rvq.book{stage}"), self.rvq.books[stage].clone());
            t.insert(format!("rvq.sum{stage}"), self.rvq.sums[stage].clone());
            t.insert(format!("rvq.count{stage}"), Tensor::vector(self.rvq.counts[stage].clone()));
            let dead = self.rvq.dead_steps[stage].iter().map(|&v| v as f32).collect();
            t.insert(format!("rvq.dead{stage}"), Tensor::new(vec![k], dead).unwrap());
        }
        t.insert("meta.steps_trained", Tensor::scalar(self.steps_trained as f32));
        t
    }

    /// Rebuilds a codec from a checkpoint written by [`Codec::to_table`].
    pub fn from_table(corpus_seed: u64, input_dim: usize, config: CodecConfig, table: &TensorTable) -> Result<Self> {
        let mut codec = Self::new(corpus_seed, input_dim, config, 0)?;
        let ids: Vec<ParamId> = codec.store.ids().collect();
        for id in ids {
            let name = format!("param.{}", codec.store.name(id));
            let shape = codec.store.get(id).shape().to_vec();
            let v = table.require_shape(&name, &shape)?.clone();
            codec.store.set(id, v)?;
        }
        let (k, d) = (codec.config.codebook_size, codec.config.encoder.dim);
        for stage in 0..codec.config.nq {
            codec.rvq.books[stage] = table.require_shape(&format!("rvq.book{stage}"), &[k, d])?.clone();
            codec.rvq.sums[stage] = table.require_shape(&format!("rvq.sum{stage}"), &[k, d])?.clone();
            codec.rvq.counts[stage] = table.require_shape(&format!("rvq.count{stage}"), &[k])?.data().to_vec();
            codec.rvq.dead_steps[stage] = table
                .require_shape(&format!("rvq.dead{stage}"), &[k])?
                .data()
                .iter()
                .map(|&v| v as u32)
                .collect();
        }
        codec.steps_trained = table.require_shape("meta.steps_trained", &[])?.item() as u64;
        Ok(codec)
    }

    /// Parameters trained by the optimizer; the frozen encoder has none.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }
}

pub fn layer_weights(logits: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut sm = logits.to_vec();
    ssvc_autodiff::kernels::softmax_in_place(&mut sm);
    let ns = sm.iter().map(|v| 1.0 - v).collect();
    (sm, ns)
}

/// Symmetric cross entropy with diagonal targets over an `N×N` similarity
/// matrix.
pub fn contrastive_from_similarity(g: &mut Graph, sim: Var) -> Result<Var> {
    let n = g.shape(sim)[0];
    if n < 2 {
        return Err(invalid("contrastive loss needs at least two pairs"));
    }
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.cross_entropy_logits(sim, &targets)?;
    let simt = g.transpose(sim);
    let cols = g.cross_entropy_logits(simt, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Contrastive loss between two embedding matrices at a fixed temperature.
pub fn contrastive_loss(emb_a: &Tensor, emb_b: &Tensor, temperature: f32) -> Result<f32> {
    if emb_a.shape() != emb_b.shape() {
        return Err(invalid("embedding matrices differ in shape"));
    }
    if emb_a.rows() < 2 {
        return Err(invalid("contrastive loss needs at least two pairs"));
    }
    let mut g = Graph::new();
    let a = g.constant(emb_a.clone());
    let b = g.constant(emb_b.clone());
    let bt = g.transpose(b);
    let s = g.matmul(a, bt)?;
    let s = g.scale(s, 1.0 / temperature);
    let l = contrastive_from_similarity(&mut g, s)?;
    Ok(g.value(l).item())
}

/// `1 − |cos|` averaged over matching rows of two unit-row matrices.
fn disentangle_rows(g: &mut Graph, s_s: Var, s_ns: Var) -> Result<Var> {
    let dim = g.shape(s_s)[1];
    let prod = g.mul(s_s, s_ns)?;
    let ones = g.constant(Tensor::full(&[dim], 1.0));
    let cos = g.matmul(prod, ones)?;
    let abs = g.abs(cos);
    let m = g.mean(abs);
    Ok(g.affine(m, -1.0, 1.0))
}

/// `1 − |cos(s_s, s_ns)|` for two embeddings.
pub fn disentangle_term(s_s: &[f32], s_ns: &[f32]) -> Result<f32> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(s_s.to_vec()));
    let b = g.constant(Tensor::vector(s_ns.to_vec()));
    let c = g.cosine_similarity(a, b)?;
    Ok(1.0 - g.value(c).item().abs())
}

/// Fraction of rows whose largest similarity is on the diagonal.
pub fn retrieval_accuracy(sim: &Tensor) -> f32 {
    let n = sim.rows();
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            row.iter().enumerate().all(|(j, v)| j == i || *v < row[i])
        })
        .count();
    hits as f32 / n.max(1) as f32
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecLogRecord {
    pub step: usize,
    pub recon: f32,
    pub contrastive: f32,
    pub disentangle: f32,
    pub commitment: f32,
    pub total: f32,
    pub weighted: [f32; 4],
    pub temperature: f32,
    pub utilization: f32,
    pub retrieval: f32,
    pub speaker_weights: Vec<f32>,
}

/// Samples `batch` utterances from distinct speakers.
pub fn sample_batch_indices(corpus: &Corpus, pool: &[usize], batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut by_speaker: std::collections::BTreeMap<u32, Vec<usize>> = std::collections::BTreeMap::new();
    for &i in pool {
        by_speaker.entry(corpus.records[i].speaker_id).or_default().push(i);
    }
    if by_speaker.len() < batch {
        return Err(invalid(format!(
            "batch of {batch} needs that many distinct speakers, corpus has {}",
            by_speaker.len()
        )));
    }
    let speakers: Vec<&Vec<usize>> = by_speaker.values().collect();
    let chosen: Vec<&&Vec<usize>> = speakers.choose_multiple(rng, batch).collect();
    Ok(chosen.iter().map(|utts| utts[rng.gen_range(0..utts.len())]).collect())
}

/// Trains a codec on the utterances in `pool`.
pub fn train_codec(
    corpus: &Corpus,
    pool: &[usize],
    config: &CodecConfig,
    seed: u64,
    mut log: impl FnMut(&CodecLogRecord),
) -> Result<Codec> {
    if pool.is_empty() {
        return Err(invalid("training pool is empty"));
    }
    if pool.len() < config.batch {
        return Err(invalid(format!(
            "corpus of {} utterances is smaller than the batch of {}",
            pool.len(),
            config.batch
        )));
    }
    let mut codec = Codec::new(corpus.config.seed, corpus.config.dims.feature_dim, config.clone(), seed)?;
    let mut rng = rng_for(seed, domain::CODEC_TRAIN);
    let opt_cfg = AdamWConfig {
        lr: config.lr,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &codec.store, codec.trainable_ids());
    for step in 0..config.steps {
        let idx = sample_batch_indices(corpus, pool, config.batch, &mut rng)?;
        let batch: Vec<BatchItem> = idx
            .iter()
            .map(|&i| codec.make_item(corpus.utterance(i).0, rng.gen()))
            .collect::<Result<_>>()?;
        if step == 0 {
            let stacks: Vec<&LayerStack> = batch.iter().map(|b| &b.stack).collect();
            let joined = LayerStack::concat(&stacks);
            let c = codec.non_speaker(&joined)?;
            codec.rvq.init_from(&c, joined.frames, &mut rng)?;
        }
        let mut g = Graph::new();
        let vars = codec.loss_graph(&mut g, &batch)?;
        let parts = Codec::breakdown(&g, &vars);
        let sim = g.value(vars.similarity).clone();
        let grads = g.backward(vars.objective)?.for_params(&codec.store);
        opt.step(&mut codec.store, &grads)?;
        codec.clamp_temperature();
        codec.rvq.ema_update(&vars.quantized, &mut rng);
        codec.steps_trained += 1;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            let w = codec.config.weights;
            log(&CodecLogRecord {
                step,
                recon: parts.recon,
                contrastive: parts.contrastive,
                disentangle: parts.disentangle,
                commitment: parts.commitment,
                total: parts.total,
                weighted: [
                    w.lambda0 * parts.recon,
                    w.lambda1 * parts.contrastive,
                    -w.lambda2 * parts.disentangle,
                    w.lambda3 * parts.commitment,
                ],
                temperature: codec.temperature(),
                utilization: codec.rvq.utilization(&vars.quantized.codes),
                retrieval: retrieval_accuracy(&sim),
                speaker_weights: codec.layer_weights().0,
            });
        }
    }
    Ok(codec)
}

fn validate(c: &CodecConfig) -> Result<()> {
    let checks = [
        (c.speaker_dim > 0, "speaker_dim must be positive"),
        (c.nq > 0, "nq must be positive"),
        (c.codebook_size >= 2, "codebook_size must be at least 2"),
        (c.batch >= 2, "batch must be at least 2"),
        (c.chunk_len > 0, "chunk_len must be positive"),
        (c.encoder.dim % c.extractor_heads.max(1) == 0, "encoder dim must divide by extractor_heads"),
        (c.lr > 0.0, "lr must be positive"),
        (
            c.temperature_init >= TEMPERATURE_MIN && c.temperature_init <= TEMPERATURE_MAX,
            "temperature_init outside [1e-3, 1]",
        ),
    ];
    for (ok, msg) in checks {
        if !ok {
            return Err(Error::Config(msg.into()));
        }
    }
    Ok(())
}
