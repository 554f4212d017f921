//! `ccda`: generate data, train, evaluate, gradient-check and run the ablation ladder.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or inputs: exit status 2.
    #[error("{0}")]
    Validation(String),
    /// Anything that failed while doing the work: exit status 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Basic,
    Class,
    Full,
}

impl From<VariantArg> for ccda::trainer::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Basic => Self::Basic,
            VariantArg::Class => Self::Class,
            VariantArg::Full => Self::Full,
        }
    }
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted sections and keys take their defaults
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides both the scene seed and the training seed
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides train.variant
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Overrides train.iterations
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    /// Compute device; only `cpu` is available
    #[arg(long, value_name = "NAME", default_value = "cpu")]
    pub device: String,
    /// Also write PNG charts next to the reports
    #[arg(long)]
    pub plots: bool,
}

#[derive(Debug, Parser)]
#[command(name = "ccda", version, about = "Class-conditional adversarial domain adaptation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a source and a target dataset under DIR/source and DIR/target
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train one variant into a run directory
    Train {
        #[command(flatten)]
        common: Common,
        /// Source dataset directory or manifest
        #[arg(long, value_name = "PATH")]
        source: PathBuf,
        /// Target dataset directory or manifest; its labels are never read for training
        #[arg(long, value_name = "PATH")]
        target: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue the run in DIR from its latest checkpoint
        #[arg(long)]
        resume: bool,
        /// Check update isolation and detachment on every step
        #[arg(long)]
        verify_isolation: bool,
    },
    /// Score a checkpoint on a labelled split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory or manifest
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Split to score (default: eval.split)
        #[arg(long)]
        split: Option<String>,
        /// Dataset whose `train` split defines class frequencies (default: the scored split)
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Compare every loss gradient with central finite differences
    Gradcheck {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "N", default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        height: usize,
        #[arg(long, default_value_t = 5)]
        width: usize,
        /// Also write gradcheck.json here
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Add a case whose analytic gradient has the wrong sign
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Train and score basic, class and full for every seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated training seeds (default: eval.seeds)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Source dataset; generated from the config when omitted
        #[arg(long, value_name = "PATH", requires = "target")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "source")]
        target: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, out } => commands::generate(&common, &out),
        Command::Train {
            common,
            source,
            target,
            out,
            resume,
            verify_isolation,
        } => commands::train(&common, &source, &target, &out, resume, verify_isolation),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            reference,
            out,
        } => commands::eval(&common, &checkpoint, &data, split.as_deref(), reference.as_deref(), &out),
        Command::Gradcheck {
            seed,
            instances,
            classes,
            height,
            width,
            out,
            inject_sign_flip,
        } => commands::gradcheck(
            seed,
            instances,
            ccda::gradcheck::Sizes { classes, height, width },
            out.as_deref(),
            inject_sign_flip,
        ),
        Command::Ablate {
            common,
            seeds,
            source,
            target,
            out,
        } => commands::ablate(&common, seeds, source.as_deref().zip(target.as_deref()), &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
