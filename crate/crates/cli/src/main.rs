use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod output;

use config::RunConfig;

/// Exit status plus message; the status follows the documented convention
/// (2 config, 3 data, 4 divergence, 1 anything else).
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<sdlm_core::Error> for CliError {
    fn from(e: sdlm_core::Error) -> Self {
        use sdlm_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::LengthOverflow { .. } | E::InvalidLabel { .. } => 2,
            E::Divergence { .. } => 4,
            E::Shape { .. } | E::NonScalarRoot(_) | E::NonFinite(_) => 1,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "sdlm", version, about = "Simplex diffusion language modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set batch_size=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    Memorization,
    Attribute,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on a text corpus.
    Train(Common),
    /// Decode continuations for each prompt.
    Generate(Common),
    /// Classifier-guided decoding over a sweep of guidance weights.
    Control(Common),
    /// Diversity, repetition and perplexity metrics for generations.
    Eval(Common),
    /// Write the noise schedule and its compensation coefficient as CSV.
    ScheduleDump(Common),
    /// Train an attribute classifier on `label<TAB>text` lines.
    TrainClassifier(Common),
    /// Train the autoregressive reference model used for perplexity.
    TrainReference(Common),
    /// Write a synthetic corpus with vocabulary, labels and prompts.
    Synth {
        kind: SynthKind,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::train(&c.load()?),
        Command::Generate(c) => commands::generate(&c.load()?),
        Command::Control(c) => commands::control(&c.load()?),
        Command::Eval(c) => commands::eval(&c.load()?),
        Command::ScheduleDump(c) => commands::schedule_dump(&c.load()?),
        Command::TrainClassifier(c) => commands::train_classifier(&c.load()?),
        Command::TrainReference(c) => commands::train_reference(&c.load()?),
        Command::Synth { kind, common } => commands::synth(kind, &common.load()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
