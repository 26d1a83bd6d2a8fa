//! Experiment configuration. Every section is optional in the file; the
//! resolved configuration, with all defaults filled in, is what gets
//! archived next to the outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainConfig, LmVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed for model initialisation, training and sampling. The corpus has
    /// its own seed.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub lm: LmSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusConfig::default(),
            codec: CodecConfig::default(),
            lm: LmSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub model: LmConfig,
    pub train: LmTrainConfig,
    /// Variants trained by `train-lm`.
    pub variants: Vec<LmVariant>,
    /// Default prompt mode for `tts`.
    pub mode: String,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            model: LmConfig::default(),
            train: LmTrainConfig::default(),
            variants: vec![LmVariant::NoReference, LmVariant::Reference],
            mode: "text".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub disentanglement: bool,
    pub conversion: bool,
    pub tts: bool,
    /// Utterances per held-out speaker fed to the probes.
    pub probe_per_speaker: usize,
    pub retrieval_batches: usize,
    pub conversion_pairs: usize,
    pub tts_generations: usize,
    pub temperature: f32,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            disentanglement: true,
            conversion: true,
            tts: true,
            probe_per_speaker: 40,
            retrieval_batches: 20,
            conversion_pairs: 200,
            tts_generations: 200,
            temperature: 0.7,
            top_k: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.train_speakers == 0 || c.train_speakers >= c.speakers {
            return Err(Error::Config(format!(
                "train_speakers must be in 1..{}, got {}",
                c.speakers, c.train_speakers
            )));
        }
        if c.min_len == 0 || c.min_len > c.max_len {
            return Err(Error::Config("corpus needs 0 < min_len <= max_len".into()));
        }
        if self.codec.batch < 2 || self.codec.batch > c.train_speakers {
            return Err(Error::Config(format!(
                "codec batch {} must be between 2 and the {} training speakers",
                self.codec.batch, c.train_speakers
            )));
        }
        self.codec.weights.normalized()?;
        self.lm.train.schedule.validate()?;
        let m = &self.lm.model;
        if m.heads == 0 || m.model_dim % m.heads != 0 {
            return Err(Error::Config("lm model_dim must be divisible by heads".into()));
        }
        if !["text", "speech", "text-ref"].contains(&self.lm.mode.as_str()) {
            return Err(Error::Config(format!("unknown lm mode {:?}", self.lm.mode)));
        }
        if self.lm.train.reference_max_symbols < c.min_len {
            return Err(Error::Config(
                "reference_max_symbols is below the shortest utterance".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys() {
        let e = ExperimentConfig::from_toml("[codec]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = ExperimentConfig::from_toml("seed = 5\n[lm.model]\nlayers = 2\nvariant = \"r\"\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.lm.model.layers, 2);
        assert_eq!(c.lm.model.variant, LmVariant::Reference);
        assert_eq!(c.lm.model.model_dim, LmConfig::default().model_dim);
    }
}
