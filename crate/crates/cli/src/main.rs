//! `vragent`: run searches, evaluate datasets, replay journals, export
//! trajectories and apply visual token edits.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error (a bug) |
//! | 2 | bad command-line usage |
//! | 3 | configuration error |
//! | 4 | file could not be read or written |
//! | 5 | backend unavailable or failing |
//! | 6 | journal corrupt or truncated |
//! | 7 | `replay --verify` found a mismatch |
//! | 8 | invalid input data (dataset, tokens, trajectories, query) |

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vragent_core::QuestionKind;

use crate::commands::{BatchArgs, RunArgs, VteArgs};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vragent", version, about = "Teacher/student/assessor tree search for visual questions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Open,
    Closed,
}

impl From<Kind> for QuestionKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Open => QuestionKind::Open,
            Kind::Closed => QuestionKind::Closed,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Answer one question about one image.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Image reference passed to the backends.
        #[arg(long)]
        image: String,
        #[arg(long)]
        question: String,
        /// Comma-separated entities; skips entity extraction.
        #[arg(long)]
        entities: Option<String>,
        #[arg(long, default_value = "query")]
        id: String,
        #[arg(long, value_enum, default_value = "open")]
        kind: Kind,
        /// Journal path; defaults to <output_dir>/journal-<id>.jsonl.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Print the path result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Answer every record of a dataset and report metrics.
    Batch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Per-record answers (JSON lines); the summary goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Rebuild a search tree from its journal.
    Replay {
        #[arg(long)]
        journal: PathBuf,
        /// Fail unless the rebuilt best path equals the recorded one.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        json: bool,
    },
    /// Turn run journals into trajectories with advantages.
    ExportTrajectories {
        #[arg(long = "journal", required = true)]
        journals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.75)]
        baseline: f64,
    },
    /// Apply the visual token edit to a token fixture.
    VteApply {
        #[arg(long)]
        tokens: PathBuf,
        /// ROI detection confidence in [0, 1].
        #[arg(long)]
        confidence: f64,
        /// Config file; only its [vte] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a dataset.
    Metrics {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, image, question, entities, id, kind, journal, seed, output_dir, json } => {
            commands::run(RunArgs {
                config,
                image,
                question,
                entities,
                id,
                kind: kind.into(),
                journal,
                seed,
                output_dir,
                json,
            })
        }
        Command::Batch { config, dataset, out, parallel, seed, json } => {
            commands::batch(BatchArgs { config, dataset, out, parallel, seed, json })
        }
        Command::Replay { journal, verify, json } => commands::replay_cmd(&journal, verify, json),
        Command::ExportTrajectories { journals, out, baseline } => {
            commands::export_trajectories_cmd(&journals, &out, baseline)
        }
        Command::VteApply { tokens, confidence, config, kappa, out } => {
            commands::vte_apply(VteArgs { tokens, confidence, config, kappa, out })
        }
        Command::Metrics { dataset, predictions, json } => commands::metrics(&dataset, &predictions, json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("vragent: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => {
            eprintln!("vragent: internal error");
            ExitCode::from(1)
        }
    }
}
