use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssvc_core::lm::SamplingConfig;
use ssvc_core::metrics::mushra_ingest;
use ssvc_core::pipeline::{read_json, write_json_new, CodeFile, Experiment};
use ssvc_core::report::{mushra_report, render_mushra};

#[derive(Parser)]
#[command(name = "ssvc", version, about = "Speaker-disentangled codec and token LM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults to the directory's archived config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus manifest.
    GenData(Common),
    /// Train the speaker-disentangled codec.
    TrainCodec(Common),
    /// Encode the corpus into a code corpus, or one utterance to JSON.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        utterance: Option<usize>,
        #[arg(long, requires = "utterance")]
        output: Option<PathBuf>,
    },
    /// Decode a JSON code grid with the voice of a reference utterance.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Convert a source utterance to a target utterance's voice.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the token LM variants listed in the config.
    TrainLm(Common),
    /// Synthesize a symbol sequence in the voice of a reference utterance.
    Tts {
        #[command(flatten)]
        common: Common,
        /// text, speech or text-ref
        #[arg(long)]
        mode: Option<String>,
        #[arg(long = "ref")]
        reference: usize,
        /// Comma-separated content symbols.
        #[arg(long, value_delimiter = ',', required = true)]
        text: Vec<usize>,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the evaluation suite and write the report.
    Eval(Common),
    /// Paired t-tests over a MUSHRA score CSV.
    Stats {
        #[arg(long)]
        csv: PathBuf,
        /// Also write stats.txt into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open(c: &Common) -> ssvc_core::Result<Experiment> {
    Experiment::open(&c.out, c.config.as_deref(), c.seed)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

fn run(command: Command) -> ssvc_core::Result<()> {
    match command {
        Command::GenData(c) => {
            let corpus = open(&c)?.gen_data()?;
            println!("wrote {} utterances of {} speakers", corpus.len(), corpus.speakers.len());
        }
        Command::TrainCodec(c) => {
            let codec = open(&c)?.train_codec()?;
            println!("trained codec for {} steps", codec.steps_trained);
        }
        Command::Encode {
            common,
            utterance,
            output,
        } => {
            let exp = open(&common)?;
            match utterance {
                Some(i) => {
                    let codes = exp.encode_utterance(i)?;
                    match output {
                        Some(p) => write_json_new(&p, &codes)?,
                        None => print_json(&codes),
                    }
                }
                None => {
                    let items = exp.encode_corpus()?;
                    println!("encoded {} utterances", items.len());
                }
            }
        }
        Command::Decode {
            common,
            input,
            reference,
            output,
        } => {
            let exp = open(&common)?;
            let codes: CodeFile = read_json(&input)?;
            write_json_new(&output, &exp.decode(&codes, reference)?)?;
        }
        Command::Convert {
            common,
            source,
            target,
            output,
        } => {
            let out = open(&common)?.convert(source, target)?;
            println!(
                "secs to target {:.4}, to source {:.4}, wer_analog {:.4}",
                out.secs_to_target, out.secs_to_source, out.wer_analog
            );
            if let Some(p) = output {
                write_json_new(&p, &out)?;
            }
        }
        Command::TrainLm(c) => {
            for lm in open(&c)?.train_lm()? {
                println!("trained lm ({:?}) for {} steps", lm.config.variant, lm.steps_trained);
            }
        }
        Command::Tts {
            common,
            mode,
            reference,
            text,
            temperature,
            top_k,
            output,
        } => {
            let exp = open(&common)?;
            let mode = mode.unwrap_or_else(|| exp.config.lm.mode.clone());
            let sampling = SamplingConfig {
                temperature: temperature.unwrap_or(exp.config.eval.temperature),
                top_k: top_k.unwrap_or(exp.config.eval.top_k),
                max_new: usize::MAX,
            };
            let out = exp.tts(&mode, reference, &text, &sampling)?;
            println!(
                "{} tokens, {}, wer_analog {:.4}",
                out.tokens,
                if out.stopped { "stopped at EOS" } else { "hit the length limit" },
                out.wer_analog
            );
            if let Some(p) = output {
                write_json_new(&p, &out)?;
            }
        }
        Command::Eval(c) => {
            let exp = open(&c)?;
            let report = exp.eval()?;
            print!("{}", report.render_text());
        }
        Command::Stats { csv, out } => {
            let table = mushra_ingest(&csv)?;
            let report = mushra_report(&table)?;
            let text = render_mushra(&table, &report);
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_text_new(&dir.join("stats.txt"), &text)?;
            }
        }
    }
    Ok(())
}

fn write_text_new(path: &Path, text: &str) -> ssvc_core::Result<()> {
    if path.exists() {
        return Err(ssvc_core::Error::InvalidInput(format!(
            "{} already exists; outputs are never replaced",
            path.display()
        )));
    }
    ssvc_core::checkpoint::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
