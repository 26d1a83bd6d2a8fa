//! Evaluation protocols built on the metrics: speaker probes, contrastive
//! retrieval and voice-conversion scoring on held-out speakers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ssvc_autodiff::Graph;

use crate::codec::{contrastive_from_similarity, retrieval_accuracy, sample_batch_indices, Codec};
use crate::corpus::Corpus;
use crate::encoder::LayerStack;
use crate::error::{invalid, Result};
use crate::metrics::{f0_correlation, secs, speaker_probe, wer_analog, ProbeConfig};
use crate::rng::{domain, rng_for};
use crate::synth::ProsodyContour;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub speakers: usize,
    pub chance: f64,
    /// Probe accuracy on speaker embeddings.
    pub embedding_probe: f64,
    /// Probe accuracy on time-averaged quantized non-speaker features.
    pub code_probe: f64,
    /// Positive-pair identification rate in batches of distinct speakers.
    pub retrieval: f64,
    pub retrieval_loss: f64,
}

/// Up to `per_speaker` utterances of every speaker in `pool`, in corpus order.
pub fn per_speaker_subset(corpus: &Corpus, pool: &[usize], per_speaker: usize) -> Vec<usize> {
    let mut taken = std::collections::BTreeMap::<u32, usize>::new();
    pool.iter()
        .copied()
        .filter(|&i| {
            let n = taken.entry(corpus.records[i].speaker_id).or_default();
            *n += 1;
            *n <= per_speaker
        })
        .collect()
}

/// Alternating train/eval split within each speaker.
pub fn alternating_split(corpus: &Corpus, items: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::BTreeMap::<u32, usize>::new();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (pos, &i) in items.iter().enumerate() {
        let n = seen.entry(corpus.records[i].speaker_id).or_default();
        if *n % 2 == 0 {
            train.push(pos);
        } else {
            eval.push(pos);
        }
        *n += 1;
    }
    (train, eval)
}

pub fn disentanglement(
    codec: &Codec,
    corpus: &Corpus,
    pool: &[usize],
    per_speaker: usize,
    retrieval_batches: usize,
    seed: u64,
) -> Result<DisentanglementReport> {
    let items = per_speaker_subset(corpus, pool, per_speaker);
    let labels: Vec<usize> = items.iter().map(|&i| corpus.records[i].speaker_id as usize).collect();
    let speakers = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if speakers < 2 {
        return Err(invalid("disentanglement evaluation needs at least two speakers"));
    }
    let mut embeddings = Vec::with_capacity(items.len());
    let mut code_means = Vec::with_capacity(items.len());
    for &i in &items {
        let stack = codec.encode_layers(&corpus.utterance(i).0);
        embeddings.push(codec.speaker_embed_stack(&stack)?);
        let c = codec.non_speaker(&stack)?;
        let q = codec.rvq.quantize(&c, stack.frames)?;
        code_means.push(time_mean(&q.values, stack.dim));
    }
    let (train, eval) = alternating_split(corpus, &items);
    let probe = ProbeConfig::default();
    let embedding_probe = speaker_probe(&embeddings, &labels, &train, &eval, &probe)?;
    let code_probe = speaker_probe(&code_means, &labels, &train, &eval, &probe)?;

    let mut rng = rng_for(seed, domain::EVAL);
    let batch = codec.config.batch.min(speakers);
    let (mut hits, mut loss) = (0.0, 0.0);
    for _ in 0..retrieval_batches {
        let idx = sample_batch_indices(corpus, pool, batch, &mut rng)?;
        let items: Vec<_> = idx
            .iter()
            .map(|&i| codec.make_item(corpus.utterance(i).0, rng.gen()))
            .collect::<Result<_>>()?;
        let a: Vec<&LayerStack> = items.iter().map(|b| &b.chunk_a).collect();
        let b: Vec<&LayerStack> = items.iter().map(|b| &b.chunk_b).collect();
        let mut g = Graph::new();
        let ea = codec.speaker_embedding_var(&mut g, &a, true)?;
        let eb = codec.speaker_embedding_var(&mut g, &b, true)?;
        let ebt = g.transpose(eb);
        let sim = g.matmul(ea, ebt)?;
        let sim = g.scale(sim, 1.0 / codec.temperature());
        let l = contrastive_from_similarity(&mut g, sim)?;
        hits += retrieval_accuracy(g.value(sim)) as f64;
        loss += g.value(l).item() as f64;
    }
    let nb = retrieval_batches.max(1) as f64;
    Ok(DisentanglementReport {
        speakers,
        chance: 1.0 / speakers as f64,
        embedding_probe,
        code_probe,
        retrieval: hits / nb,
        retrieval_loss: loss / nb,
    })
}

fn time_mean(values: &[f32], dim: usize) -> Vec<f32> {
    let rows = values.len() / dim;
    let mut m = vec![0.0; dim];
    for r in values.chunks(dim) {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows as f32);
    m
}

/// Means over conversion pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub pairs: usize,
    pub secs_to_target: f64,
    pub secs_to_source: f64,
    pub f0_to_source: f64,
    pub f0_to_other: f64,
    pub wer_converted: f64,
    pub wer_reconstructed: f64,
}

/// `(source, target)` pairs with different speakers, drawn from `pool`.
pub fn conversion_pairs(corpus: &Corpus, pool: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let speakers: std::collections::BTreeSet<u32> = pool.iter().map(|&i| corpus.records[i].speaker_id).collect();
    if speakers.len() < 2 {
        return Err(invalid("conversion needs at least two speakers"));
    }
    let mut rng = rng_for(seed, domain::EVAL ^ 0x5a);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = *pool.choose(&mut rng).unwrap();
        let t = *pool.choose(&mut rng).unwrap();
        if corpus.records[s].speaker_id != corpus.records[t].speaker_id {
            out.push((s, t));
        }
    }
    Ok(out)
}

/// Pearson correlation on the common prefix of two contours.
fn prefix_correlation(a: &ProsodyContour, b: &ProsodyContour) -> Result<f64> {
    let n = a.len().min(b.len());
    f0_correlation(&ProsodyContour(a.0[..n].to_vec()), &ProsodyContour(b.0[..n].to_vec()))
}

pub fn conversion(codec: &Codec, corpus: &Corpus, pairs: &[(usize, usize)], seed: u64) -> Result<ConversionReport> {
    codec.require_trained()?;
    let mut rng = rng_for(seed, domain::EVAL ^ 0xa5);
    let mut acc = [0.0f64; 6];
    for &(s, t) in pairs {
        let (src, src_contour) = corpus.utterance(s);
        let (tgt, _) = corpus.utterance(t);
        let src_spk = corpus.speaker(corpus.records[s].speaker_id);
        let tgt_spk = corpus.speaker(corpus.records[t].speaker_id);
        let converted = codec.convert_voice(&src, &tgt)?;
        let recon = codec.reconstruct(&src)?;
        acc[0] += secs(&corpus.tables, &converted, &tgt)?;
        acc[1] += secs(&corpus.tables, &converted, &src)?;
        let contour = corpus.tables.oracle_extract_prosody(&converted, tgt_spk);
        acc[2] += prefix_correlation(&contour, &src_contour)?;
        let other = loop {
            let o = rng.gen_range(0..corpus.len());
            if o != s {
                break o;
            }
        };
        acc[3] += prefix_correlation(&contour, &corpus.utterance(other).1)?;
        let content = &corpus.records[s].content;
        acc[4] += wer_analog(&corpus.tables, &converted, content, tgt_spk)?;
        acc[5] += wer_analog(&corpus.tables, &recon, content, src_spk)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok(ConversionReport {
        pairs: pairs.len(),
        secs_to_target: acc[0] / n,
        secs_to_source: acc[1] / n,
        f0_to_source: acc[2] / n,
        f0_to_other: acc[3] / n,
        wer_converted: acc[4] / n,
        wer_reconstructed: acc[5] / n,
    })
}
