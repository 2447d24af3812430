use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tracing::Level;
use unitts_cli::{exit_code, Pipeline, PipelineConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "unitts", version, about = "Text to discrete units to speech, one stage at a time")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, short, global = true, default_value = "configs/synthetic.json")]
    config: PathBuf,

    /// Use this workdir instead of the one in the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Redo the command even if its artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus with ground-truth units and durations.
    GenCorpus,
    /// Build the token vocabulary from every transcript.
    BuildVocab,
    /// Fit the k-means codebook on speech features.
    TrainCodebook,
    /// Quantize every utterance to units.
    EncodeUnits,
    /// Force-align transcripts to features for duration targets.
    Align,
    /// Train the text-to-unit model on paired data.
    TrainT2u {
        /// Cap on paired frames per language (low-resource mode).
        #[arg(long, value_name = "FRAMES")]
        max_paired_per_language: Option<usize>,
    },
    /// Train the unit-to-waveform vocoder on speech only.
    TrainVocoder,
    /// Synthesize one sentence to a WAV file.
    Synthesize {
        #[arg(long)]
        text: String,
        #[arg(long)]
        language: String,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every stage on held-out texts.
    Eval,
    /// Synthesize one language's text with speakers from other languages.
    CrossLingual {
        #[arg(long)]
        text_lang: String,
        /// Target speakers; every speaker without data in the language when omitted.
        #[arg(long = "speaker")]
        speakers: Vec<String>,
        /// Texts to synthesize; the held-out texts of the language when omitted.
        #[arg(long = "text")]
        texts: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config).map_err(|e| Usage(format!("{e:#}")))?;
    if let Some(w) = cli.workdir {
        cfg.workdir = w;
    }
    cfg.check_paths().map_err(|e| unitts_cli::Precondition(format!("{e:#}")))?;
    let p = Pipeline::new(cfg, cli.force);
    match cli.command {
        Command::GenCorpus => p.gen_corpus(),
        Command::BuildVocab => p.build_vocab(),
        Command::TrainCodebook => p.train_codebook(),
        Command::EncodeUnits => p.encode_units(),
        Command::Align => p.align(),
        Command::TrainT2u {
            max_paired_per_language,
        } => p.train_t2u(max_paired_per_language),
        Command::TrainVocoder => p.train_vocoder(),
        Command::Synthesize {
            text,
            language,
            speaker,
            out,
        } => p.synthesize(&text, &language, &speaker, &out).map(|_| ()),
        Command::Eval => p.eval().map(|_| ()),
        Command::CrossLingual {
            text_lang,
            speakers,
            texts,
        } => p.cross_lingual(&text_lang, &speakers, &texts).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { Level::WARN } else { Level::INFO };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
