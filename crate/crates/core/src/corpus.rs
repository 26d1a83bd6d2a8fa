//! Corpus layout: speakers, utterance records and the line-delimited
//! manifest that lists them.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{domain, rng_for};
use crate::synth::{make_speaker, CorpusTables, FeatureSequence, ProsodyContour, SpeakerParams, SynthDims, UtteranceSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f32,
    /// Speakers `0..train_speakers` are used for training; the rest are held out.
    pub train_speakers: usize,
    pub dims: SynthDims,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            speakers: 64,
            utterances_per_speaker: 200,
            min_len: 5,
            max_len: 12,
            noise_sigma: 0.02,
            train_speakers: 48,
            dims: SynthDims::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: u32,
    pub speaker_id: u32,
    pub speaker_seed: u64,
    pub content: Vec<usize>,
    pub prosody_seed: u64,
    pub noise_sigma: f32,
}

/// Draws `n` speaker seeds from a master seed, skipping candidates whose
/// speaker vector has `|cos| >= max_abs_cos` with one already accepted.
pub fn distinct_speaker_seeds(master: u64, n: usize, dim: usize, max_abs_cos: f32) -> Vec<u64> {
    let mut rng = rng_for(master, domain::SPEAKER);
    let mut seeds = Vec::with_capacity(n);
    let mut accepted: Vec<Vec<f32>> = Vec::with_capacity(n);
    while seeds.len() < n {
        let seed: u64 = rng.gen();
        let p = make_speaker(seed, 0, dim).p;
        let close = accepted
            .iter()
            .any(|q| q.iter().zip(&p).map(|(a, b)| a * b).sum::<f32>().abs() >= max_abs_cos);
        if !close {
            accepted.push(p);
            seeds.push(seed);
        }
    }
    seeds
}

pub struct Corpus {
    pub config: CorpusConfig,
    pub tables: CorpusTables,
    pub speakers: Vec<SpeakerParams>,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn generate(config: CorpusConfig) -> Result<Self> {
        validate(&config)?;
        let tables = CorpusTables::new(config.seed, config.dims);
        let seeds = distinct_speaker_seeds(config.seed, config.speakers, config.dims.speaker_dim, 0.9);
        let speakers: Vec<SpeakerParams> = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| tables.speaker(s, i as u32))
            .collect();
        let mut rng = rng_for(config.seed, domain::CORPUS);
        let mut records = Vec::with_capacity(config.speakers * config.utterances_per_speaker);
        for spk in &speakers {
            for _ in 0..config.utterances_per_speaker {
                let len = rng.gen_range(config.min_len..=config.max_len);
                let content = (0..len).map(|_| rng.gen_range(0..config.dims.alphabet)).collect();
                records.push(UtteranceRecord {
                    id: records.len() as u32,
                    speaker_id: spk.speaker_id,
                    speaker_seed: spk.seed,
                    content,
                    prosody_seed: rng.gen(),
                    noise_sigma: config.noise_sigma,
                });
            }
        }
        Ok(Self {
            config,
            tables,
            speakers,
            records,
        })
    }

    /// Rebuilds a corpus from its configuration and a manifest; the records
    /// must agree with what the configuration generates.
    pub fn from_manifest(config: CorpusConfig, path: &Path) -> Result<Self> {
        let corpus = Self::generate(config)?;
        let records = read_manifest(path)?;
        if records != corpus.records {
            return Err(invalid(format!(
                "manifest {} does not match the corpus configuration",
                path.display()
            )));
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speaker(&self, id: u32) -> &SpeakerParams {
        &self.speakers[id as usize]
    }

    pub fn spec(&self, index: usize) -> UtteranceSpec {
        let r = &self.records[index];
        UtteranceSpec {
            speaker: self.speakers[r.speaker_id as usize].clone(),
            content: r.content.clone(),
            prosody_seed: r.prosody_seed,
            frames_per_symbol: self.config.dims.frames_per_symbol,
            noise_sigma: r.noise_sigma,
        }
    }

    pub fn utterance(&self, index: usize) -> (FeatureSequence, ProsodyContour) {
        self.tables
            .make_utterance(&self.spec(index))
            .expect("corpus records are valid by construction")
    }

    pub fn is_train_speaker(&self, speaker_id: u32) -> bool {
        (speaker_id as usize) < self.config.train_speakers
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.is_train_speaker(self.records[i].speaker_id))
            .collect()
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.is_train_speaker(self.records[i].speaker_id))
            .collect()
    }

    pub fn write_manifest(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r).map_err(|e| Error::Config(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("manifest line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn validate(c: &CorpusConfig) -> Result<()> {
    if c.speakers < 2 || c.utterances_per_speaker == 0 {
        return Err(invalid("corpus needs at least two speakers with one utterance each"));
    }
    if c.min_len == 0 || c.min_len > c.max_len {
        return Err(invalid(format!("invalid content length range {}..={}", c.min_len, c.max_len)));
    }
    if c.train_speakers > c.speakers {
        return Err(invalid("train_speakers exceeds speakers"));
    }
    Ok(())
}
