use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refinery_core::config::{AnnotatorMode, DEFAULT_BIND};

#[derive(Debug, Parser)]
#[command(
    name = "refinery",
    version,
    about = "On-line object detection with weakly supervised refinement"
)]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic world utilities.
    #[command(subcommand)]
    World(WorldCommand),
    /// Training phases and the full benchmark.
    #[command(subcommand)]
    Run(RunCommand),
    /// Evaluate saved models on a sequence.
    Eval {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Rebuild the report tables from event logs.
    Report {
        /// An event log, or a directory of them.
        #[arg(long)]
        log: PathBuf,
    },
    /// Run the annotation service on its own.
    Serve(ServiceArgs),
    /// Read text commands ("train <class>", "refine <path>", "stop",
    /// "status") from stdin.
    Shell {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Who answers queries; defaults to the configured mode.
        #[arg(long, value_enum)]
        annotator: Option<AnnotatorArg>,
        #[command(flatten)]
        service: ServiceArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum WorldCommand {
    /// Write the benchmark sequences of every group.
    Gen {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum RunCommand {
    /// Depth-supervised training; saves models and the labeled dataset.
    Supervised {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Train on this handheld sequence instead of generated ones.
        #[arg(long, requires = "class")]
        sequence: Option<PathBuf>,
        /// Object shown in `--sequence`, by name or as classN.
        #[arg(long)]
        class: Option<String>,
    },
    /// Refinement phase on one sequence.
    Refine {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Who answers queries; defaults to the configured mode.
        #[arg(long, value_enum)]
        annotator: Option<AnnotatorArg>,
        /// Output directory of a previous `run supervised`; without it the
        /// first benchmark group is trained first.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Sequence to refine on; defaults to the first group's table-top
        /// sequence.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[command(flatten)]
        service: ServiceArgs,
    },
    /// Every group: supervised training, refinement and evaluation.
    Benchmark {
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ServiceArgs {
    /// Address of the annotation service.
    #[arg(long, env = "REFINERY_BIND")]
    pub bind: Option<String>,
    /// Built annotation UI assets to serve under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

impl ServiceArgs {
    pub fn bind_or<'a>(&'a self, fallback: &'a str) -> &'a str {
        self.bind.as_deref().unwrap_or(if fallback.is_empty() {
            DEFAULT_BIND
        } else {
            fallback
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnnotatorArg {
    Oracle,
    Human,
}

impl From<AnnotatorArg> for AnnotatorMode {
    fn from(a: AnnotatorArg) -> Self {
        match a {
            AnnotatorArg::Oracle => AnnotatorMode::Oracle,
            AnnotatorArg::Human => AnnotatorMode::Human,
        }
    }
}
