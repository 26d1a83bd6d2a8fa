//! Experiment directories and the steps that fill them.
//!
//! ```text
//! <out>/config.toml      resolved configuration
//!       corpus.jsonl     utterance manifest
//!       codec.ckpt       codec parameters and codebooks
//!       codec_log.jsonl
//!       codes.ckpt       code corpus
//!       lm-nr.ckpt, lm-r.ckpt and their logs
//!       report.txt, report.jsonl
//! ```
//!
//! Artifacts are written once; a step refuses to replace an existing file.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, TensorTable};
use crate::codec::{train_codec, Codec};
use crate::config::ExperimentConfig;
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::evaluate::{conversion, conversion_pairs, disentanglement};
use crate::lm::{
    code_corpus_from_table, code_corpus_to_table, train_lm, CodeUtterance, LmConfig, LmVariant, SamplingConfig,
    TokenLm, Vocab,
};
use crate::metrics::wer_analog;
use crate::report::EvalReport;
use crate::rng::derive_seed;
use crate::rvq::CodeGrid;
use crate::synth::FeatureSequence;
use crate::tts::{encode_corpus, synthesize, tts_items, tts_scores, Reference, Synthesis};

pub const CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "corpus.jsonl";
pub const CODEC: &str = "codec.ckpt";
pub const CODEC_LOG: &str = "codec_log.jsonl";
pub const CODES: &str = "codes.ckpt";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSONL: &str = "report.jsonl";

pub fn variant_tag(v: LmVariant) -> &'static str {
    match v {
        LmVariant::NoReference => "nr",
        LmVariant::Reference => "r",
    }
}

pub fn system_name(v: LmVariant, mode: &str) -> String {
    let prompting = if mode == "speech" { "speech" } else { "text" };
    format!("LSSL-{} {prompting}", variant_tag(v).to_uppercase())
}

/// Prompt modes evaluated for each LM variant.
pub fn variant_modes(v: LmVariant) -> &'static [&'static str] {
    match v {
        LmVariant::NoReference => &["text", "speech"],
        LmVariant::Reference => &["text-ref"],
    }
}

pub struct Experiment {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
}

impl Experiment {
    /// Opens or creates `dir`. The configuration comes from `config_path`,
    /// else from the directory's archived config, else the defaults; `seed`
    /// overrides its seed. A directory created under a different
    /// configuration is rejected.
    pub fn open(dir: &Path, config_path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let archived = dir.join(CONFIG);
        let mut config = match config_path {
            Some(p) => ExperimentConfig::load(p)?,
            None if archived.exists() => ExperimentConfig::load(&archived)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        let text = config.to_toml();
        if archived.exists() {
            let existing = ExperimentConfig::load(&archived)?;
            if existing != config {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration",
                    dir.display()
                )));
            }
        } else {
            std::fs::create_dir_all(dir)?;
            write_atomic(&archived, text.as_bytes())?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fresh(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            return Err(invalid(format!("{} already exists; outputs are never replaced", p.display())));
        }
        Ok(p)
    }

    fn require(&self, name: &str, step: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::ModelNotReady(format!("{} is missing; run {step} first", p.display())));
        }
        Ok(p)
    }

    pub fn gen_data(&self) -> Result<Corpus> {
        let path = self.fresh(MANIFEST)?;
        let corpus = Corpus::generate(self.config.corpus.clone())?;
        let mut buf = Vec::new();
        corpus.write_manifest(&mut buf)?;
        write_atomic(&path, &buf)?;
        Ok(corpus)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let p = self.require(MANIFEST, "gen-data")?;
        Corpus::from_manifest(self.config.corpus.clone(), &p)
    }

    pub fn train_codec(&self) -> Result<Codec> {
        let corpus = self.corpus()?;
        let ckpt = self.fresh(CODEC)?;
        let log_path = self.fresh(CODEC_LOG)?;
        let mut log = Vec::new();
        let codec = train_codec(&corpus, &corpus.train_indices(), &self.config.codec, self.config.seed, |r| {
            log::info!(
                "codec step {} total {:.4} recon {:.4} contrastive {:.4} retrieval {:.2}",
                r.step,
                r.total,
                r.recon,
                r.contrastive,
                r.retrieval
            );
            log.extend(serde_json::to_vec(r).expect("log record serialises"));
            log.push(b'\n');
        })?;
        codec.to_table().save(&ckpt)?;
        write_atomic(&log_path, &log)?;
        Ok(codec)
    }

    pub fn codec(&self) -> Result<Codec> {
        let p = self.require(CODEC, "train-codec")?;
        let dims = &self.config.corpus.dims;
        Codec::from_table(
            self.config.corpus.seed,
            dims.feature_dim,
            self.config.codec.clone(),
            &TensorTable::load(&p)?,
        )
    }

    /// Encodes every corpus utterance into the code corpus file.
    pub fn encode_corpus(&self) -> Result<Vec<CodeUtterance>> {
        let path = self.fresh(CODES)?;
        let corpus = self.corpus()?;
        let codec = self.codec()?;
        let all: Vec<usize> = (0..corpus.len()).collect();
        let items = encode_corpus(&codec, &corpus, &all)?;
        code_corpus_to_table(&items).save(&path)?;
        Ok(items)
    }

    pub fn code_corpus(&self) -> Result<Vec<CodeUtterance>> {
        let p = self.require(CODES, "encode")?;
        code_corpus_from_table(&TensorTable::load(&p)?)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            nq: self.config.codec.nq,
            codebook_size: self.config.codec.codebook_size,
            alphabet: self.config.corpus.dims.alphabet,
        }
    }

    pub fn lm_config(&self, variant: LmVariant) -> LmConfig {
        LmConfig {
            variant,
            ..self.config.lm.model.clone()
        }
    }

    pub fn lm_file(variant: LmVariant) -> String {
        format!("lm-{}.ckpt", variant_tag(variant))
    }

    /// Trains every configured variant on the training speakers' codes,
    /// encoding the corpus first if no code corpus exists yet.
    pub fn train_lm(&self) -> Result<Vec<TokenLm>> {
        let codes = match self.path(CODES).exists() {
            true => self.code_corpus()?,
            false => self.encode_corpus()?,
        };
        let corpus = self.corpus()?;
        let train: Vec<CodeUtterance> = codes
            .into_iter()
            .filter(|u| corpus.is_train_speaker(u.speaker_id))
            .collect();
        let mut out = Vec::new();
        for &variant in &self.config.lm.variants {
            let ckpt = self.fresh(&Self::lm_file(variant))?;
            let log_path = self.fresh(&format!("lm-{}_log.jsonl", variant_tag(variant)))?;
            let mut log = Vec::new();
            let lm = train_lm(
                &train,
                Some(&corpus),
                &self.lm_config(variant),
                self.vocab(),
                self.config.corpus.dims.feature_dim,
                &self.config.lm.train,
                derive_seed(self.config.seed, variant as u64),
                |r| {
                    log::info!("lm-{} step {} lr {:.2e} loss {:.4}", variant_tag(variant), r.step, r.lr, r.loss);
                    log.extend(serde_json::to_vec(r).expect("log record serialises"));
                    log.push(b'\n');
                },
            )?;
            lm.to_table().save(&ckpt)?;
            write_atomic(&log_path, &log)?;
            out.push(lm);
        }
        Ok(out)
    }

    pub fn lm(&self, variant: LmVariant) -> Result<TokenLm> {
        let p = self.require(&Self::lm_file(variant), "train-lm")?;
        TokenLm::from_table(
            self.lm_config(variant),
            self.vocab(),
            self.config.corpus.dims.feature_dim,
            &TensorTable::load(&p)?,
        )
    }

    /// Synthesizes `text` in the voice of corpus utterance `reference`.
    pub fn tts(&self, mode: &str, reference: usize, text: &[usize], sampling: &SamplingConfig) -> Result<TtsOutput> {
        let corpus = self.corpus()?;
        check_index(&corpus, reference)?;
        let codec = self.codec()?;
        let variant = if mode == "text-ref" {
            LmVariant::Reference
        } else {
            LmVariant::NoReference
        };
        let lm = self.lm(variant)?;
        let r = Reference::from_corpus(&codec, &corpus, reference)?;
        let Synthesis {
            features,
            tokens,
            stopped,
        } = synthesize(&lm, &codec, mode, text, &r, sampling, self.config.seed)?;
        let speaker = corpus.speaker(corpus.records[reference].speaker_id);
        Ok(TtsOutput {
            wer_analog: wer_analog(&corpus.tables, &features, text, speaker)?,
            tokens,
            stopped,
            features: FeatureFile::from(&features),
        })
    }

    /// Runs the evaluation suite on held-out speakers and writes the report.
    pub fn eval(&self) -> Result<EvalReport> {
        let text_path = self.fresh(REPORT_TEXT)?;
        let jsonl_path = self.fresh(REPORT_JSONL)?;
        let cfg = &self.config.eval;
        let corpus = self.corpus()?;
        let codec = self.codec()?;
        let held = corpus.heldout_indices();
        let seed = self.config.seed;
        let mut report = EvalReport {
            seed,
            ..EvalReport::default()
        };
        if cfg.disentanglement {
            let d = disentanglement(
                &codec,
                &corpus,
                &held,
                cfg.probe_per_speaker,
                cfg.retrieval_batches,
                derive_seed(seed, 1),
            )?;
            report.add_disentanglement(&d);
        }
        if cfg.conversion {
            let pairs = conversion_pairs(&corpus, &held, cfg.conversion_pairs, derive_seed(seed, 2))?;
            report.add_conversion(&conversion(&codec, &corpus, &pairs, derive_seed(seed, 3))?);
        }
        if cfg.tts {
            let items = tts_items(
                &corpus,
                &held,
                cfg.tts_generations,
                self.config.lm.train.reference_max_symbols,
                derive_seed(seed, 4),
            )?;
            let sampling = SamplingConfig {
                temperature: cfg.temperature,
                top_k: cfg.top_k,
                max_new: usize::MAX,
            };
            let mut scores = Vec::new();
            for &variant in &self.config.lm.variants {
                let lm = self.lm(variant)?;
                for mode in variant_modes(variant) {
                    let name = system_name(variant, mode);
                    log::info!("evaluating {name}");
                    scores.push(tts_scores(&name, &lm, &codec, &corpus, mode, &items, &sampling, derive_seed(seed, 5))?);
                }
            }
            report.add_tts(&scores)?;
        }
        write_atomic(&text_path, report.render_text().as_bytes())?;
        write_atomic(&jsonl_path, report.render_jsonl().as_bytes())?;
        Ok(report)
    }
}

fn check_index(corpus: &Corpus, index: usize) -> Result<()> {
    if index >= corpus.len() {
        return Err(invalid(format!("utterance {index} does not exist (corpus has {})", corpus.len())));
    }
    Ok(())
}

/// Feature matrix as JSON rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub frames: Vec<Vec<f32>>,
}

impl From<&FeatureSequence> for FeatureFile {
    fn from(f: &FeatureSequence) -> Self {
        Self {
            frames: (0..f.len()).map(|t| f.frame(t).to_vec()).collect(),
        }
    }
}

/// Code grid as JSON rows of per-codebook indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeFile {
    pub codes: Vec<Vec<u32>>,
}

impl From<&CodeGrid> for CodeFile {
    fn from(g: &CodeGrid) -> Self {
        Self {
            codes: (0..g.frames).map(|t| g.row(t).to_vec()).collect(),
        }
    }
}

impl CodeFile {
    pub fn to_grid(&self, nq: usize) -> Result<CodeGrid> {
        if let Some(r) = self.codes.iter().position(|r| r.len() != nq) {
            return Err(invalid(format!("frame {r} has {} codes, expected {nq}", self.codes[r].len())));
        }
        CodeGrid::new(self.codes.len(), nq, self.codes.concat())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsOutput {
    pub wer_analog: f64,
    pub tokens: usize,
    pub stopped: bool,
    pub features: FeatureFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertOutput {
    pub secs_to_target: f64,
    pub secs_to_source: f64,
    pub wer_analog: f64,
    pub features: FeatureFile,
}

impl Experiment {
    pub fn encode_utterance(&self, index: usize) -> Result<CodeFile> {
        let corpus = self.corpus()?;
        check_index(&corpus, index)?;
        let (grid, _) = self.codec()?.encode(&corpus.utterance(index).0)?;
        Ok(CodeFile::from(&grid))
    }

    /// Decodes codes with the speaker embedding of corpus utterance `speaker_ref`.
    pub fn decode(&self, codes: &CodeFile, speaker_ref: usize) -> Result<FeatureFile> {
        let corpus = self.corpus()?;
        check_index(&corpus, speaker_ref)?;
        let codec = self.codec()?;
        let grid = codes.to_grid(codec.config.nq)?;
        let speaker = codec.speaker_embed(&corpus.utterance(speaker_ref).0)?;
        Ok(FeatureFile::from(&codec.decode_codes(&grid, &speaker)?))
    }

    pub fn convert(&self, source: usize, target: usize) -> Result<ConvertOutput> {
        let corpus = self.corpus()?;
        check_index(&corpus, source)?;
        check_index(&corpus, target)?;
        let codec = self.codec()?;
        let (src, _) = corpus.utterance(source);
        let (tgt, _) = corpus.utterance(target);
        let converted = codec.convert_voice(&src, &tgt)?;
        let tgt_speaker = corpus.speaker(corpus.records[target].speaker_id);
        Ok(ConvertOutput {
            secs_to_target: crate::metrics::secs(&corpus.tables, &converted, &tgt)?,
            secs_to_source: crate::metrics::secs(&corpus.tables, &converted, &src)?,
            wer_analog: wer_analog(&corpus.tables, &converted, &corpus.records[source].content, tgt_speaker)?,
            features: FeatureFile::from(&converted),
        })
    }
}

/// Writes `value` as pretty JSON, refusing to replace an existing file.
pub fn write_json_new(path: &Path, value: &impl Serialize) -> Result<()> {
    if path.exists() {
        return Err(invalid(format!("{} already exists; outputs are never replaced", path.display())));
    }
    let mut buf = serde_json::to_vec_pretty(value).map_err(|e| invalid(e.to_string()))?;
    buf.write_all(b"\n")?;
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}
