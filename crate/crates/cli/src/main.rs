//! Pipeline driver. Exit codes: 0 success, 2 configuration error, 3 missing
//! or stale prerequisite, 4 failed verification check, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cgvrg_core::config::PipelineConfig;
use cgvrg_core::error::Error;
use cgvrg_core::pipeline::{Pipeline, Stage};
use cgvrg_core::train::Phase;

#[derive(Parser)]
#[command(
    name = "cgvrg",
    about = "Caption-guided visual relationship graph captioning pipeline",
    version
)]
struct Cli {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. --set seed=9 --set block=mt2.
    /// Repeatable; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus.
    GenToy,
    /// Build word, category, and predicate vocabularies from the corpus.
    BuildVocab,
    /// Train the weakly supervised pair-predicate detector.
    TrainMil,
    /// Build one relationship graph per image from the trained detector.
    BuildGraphs,
    /// Train the captioner.
    TrainCaptioner {
        #[arg(long, value_enum)]
        phase: PhaseArg,
    },
    /// Decode every image with beam search and write generation traces.
    Generate {
        /// Beam width; defaults to the configured value.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score generations with BLEU, ROUGE-L, and CIDEr-D.
    Evaluate,
    /// Run the built-in verification suite.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Xe,
    Scst,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::MissingPrerequisite(_) | Error::Stale(_) => 3,
        Error::CheckFailed(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let config = base.apply_overrides(&cli.overrides)?;
    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::GenToy => pipeline.run(Stage::GenToy),
        Command::BuildVocab => pipeline.run(Stage::BuildVocab),
        Command::TrainMil => pipeline.run(Stage::TrainMil),
        Command::BuildGraphs => pipeline.run(Stage::BuildGraphs),
        Command::TrainCaptioner { phase } => pipeline.run(Stage::TrainCaptioner(match phase {
            PhaseArg::Xe => Phase::Xe,
            PhaseArg::Scst => Phase::Scst,
        })),
        Command::Generate { beam } => pipeline.generate(beam),
        Command::Evaluate => pipeline.run(Stage::Evaluate),
        Command::Selfcheck => pipeline.run(Stage::Selfcheck),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
