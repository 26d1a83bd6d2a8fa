//! Text-to-speech on top of the codec and the token LM, and the
//! prompting-stability evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::corpus::Corpus;
use crate::error::{invalid, Result};
use crate::lm::{unflatten_tokens, CodeUtterance, PromptInput, PromptRegistry, SamplingConfig, TokenLm};
use crate::metrics::{secs, wer_analog};
use crate::rng::{derive_seed, domain, rng_for};
use crate::synth::FeatureSequence;

/// Encodes corpus utterances into code grids.
pub fn encode_corpus(codec: &Codec, corpus: &Corpus, indices: &[usize]) -> Result<Vec<CodeUtterance>> {
    codec.require_trained()?;
    indices
        .iter()
        .map(|&i| {
            let (codes, _) = codec.encode(&corpus.utterance(i).0)?;
            Ok(CodeUtterance {
                index: i,
                speaker_id: corpus.records[i].speaker_id,
                content: corpus.records[i].content.clone(),
                codes,
            })
        })
        .collect()
}

/// A reference utterance: its transcript, codes and features.
#[derive(Clone, Debug)]
pub struct Reference {
    pub content: Vec<usize>,
    pub codes: crate::rvq::CodeGrid,
    pub features: FeatureSequence,
}

impl Reference {
    pub fn from_corpus(codec: &Codec, corpus: &Corpus, index: usize) -> Result<Self> {
        let features = corpus.utterance(index).0;
        let (codes, _) = codec.encode(&features)?;
        Ok(Self {
            content: corpus.records[index].content.clone(),
            codes,
            features,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub features: FeatureSequence,
    pub tokens: usize,
    pub stopped: bool,
}

/// Frames allowed per text symbol before generation is cut off.
pub const MAX_FRAMES_PER_SYMBOL: usize = 8;

pub fn synthesize(
    lm: &TokenLm,
    codec: &Codec,
    mode: &str,
    text: &[usize],
    reference: &Reference,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Synthesis> {
    let registry = PromptRegistry::default();
    let strategy = registry.get(mode)?;
    if strategy.needs_reference_encoder() != lm.has_reference_encoder() {
        return Err(invalid(format!(
            "prompt mode {mode:?} does not match this model's reference pathway"
        )));
    }
    let prompt = strategy.build(
        &PromptInput {
            text,
            reference_text: Some(&reference.content),
            reference_codes: Some(&reference.codes),
            reference_features: Some(&reference.features),
        },
        &lm.vocab,
    )?;
    let cfg = SamplingConfig {
        max_new: sampling.max_new.min(MAX_FRAMES_PER_SYMBOL * text.len() * lm.vocab.nq),
        ..*sampling
    };
    let generation = lm.sample(&prompt, &cfg, seed)?;
    let grid = unflatten_tokens(&generation.tokens, lm.vocab.nq, lm.vocab.codebook_size)?;
    if grid.frames == 0 {
        return Err(invalid("generation produced no frames"));
    }
    let speaker = codec.speaker_embed(&reference.features)?;
    Ok(Synthesis {
        features: codec.decode_codes(&grid, &speaker)?,
        tokens: generation.tokens.len(),
        stopped: generation.stopped,
    })
}

/// A target transcript paired with a reference utterance of the same speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtsItem {
    pub target: usize,
    pub reference: usize,
}

/// `n` items from `pool`; every reference is a different utterance of the
/// target's speaker with at most `reference_max_symbols` symbols.
pub fn tts_items(
    corpus: &Corpus,
    pool: &[usize],
    n: usize,
    reference_max_symbols: usize,
    seed: u64,
) -> Result<Vec<TtsItem>> {
    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        if corpus.records[i].content.len() <= reference_max_symbols {
            by_speaker.entry(corpus.records[i].speaker_id).or_default().push(i);
        }
    }
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&i| {
            by_speaker
                .get(&corpus.records[i].speaker_id)
                .is_some_and(|refs| refs.iter().any(|&r| r != i))
        })
        .collect();
    if eligible.is_empty() {
        return Err(invalid("no target in the pool has a short reference of the same speaker"));
    }
    let mut rng = rng_for(seed, domain::EVAL ^ 0x77);
    Ok((0..n)
        .map(|_| {
            let target = *eligible.choose(&mut rng).unwrap();
            let same = &by_speaker[&corpus.records[target].speaker_id];
            let reference = loop {
                let r = *same.choose(&mut rng).unwrap();
                if r != target {
                    break r;
                }
            };
            TtsItem { target, reference }
        })
        .collect())
}

/// Per-generation WER-analog scores for one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsScores {
    pub system: String,
    pub wer: Vec<f64>,
    /// Speaker similarity between each generation and its reference.
    pub secs: Vec<f64>,
    pub stopped: usize,
    /// Generations too short to score; they count as WER 1 (no frames)
    /// and SECS 0.
    pub failed: usize,
}

impl TtsScores {
    pub fn mean_wer(&self) -> f64 {
        mean(&self.wer)
    }

    pub fn mean_secs(&self) -> f64 {
        mean(&self.secs)
    }
}

/// Scores one (model, mode) system over `items`. A generation that yields
/// no decodable frame scores as a full deletion.
pub fn tts_scores(
    system: &str,
    lm: &TokenLm,
    codec: &Codec,
    corpus: &Corpus,
    mode: &str,
    items: &[TtsItem],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<TtsScores> {
    let mut out = TtsScores {
        system: system.to_string(),
        wer: Vec::with_capacity(items.len()),
        secs: Vec::with_capacity(items.len()),
        stopped: 0,
        failed: 0,
    };
    let mut cache: BTreeMap<usize, Reference> = BTreeMap::new();
    for (k, item) in items.iter().enumerate() {
        if !cache.contains_key(&item.reference) {
            cache.insert(item.reference, Reference::from_corpus(codec, corpus, item.reference)?);
        }
        let reference = &cache[&item.reference];
        let text = &corpus.records[item.target].content;
        let speaker = corpus.speaker(corpus.records[item.target].speaker_id);
        let s = derive_seed(seed, k as u64);
        match synthesize(lm, codec, mode, text, reference, sampling, s) {
            Ok(syn) => {
                out.stopped += syn.stopped as usize;
                out.wer.push(wer_analog(&corpus.tables, &syn.features, text, speaker)?);
                // the speaker oracle needs two whole symbol blocks
                if syn.features.len() < 2 * corpus.tables.dims.frames_per_symbol {
                    out.failed += 1;
                    out.secs.push(0.0);
                } else {
                    out.secs.push(secs(&corpus.tables, &syn.features, &reference.features)?);
                }
            }
            Err(crate::Error::InvalidInput(msg)) if msg.contains("no frames") => {
                out.failed += 1;
                out.wer.push(1.0);
                out.secs.push(0.0);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
