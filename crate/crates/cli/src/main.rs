//! `vkb`: generate data, build indices, train and query a virtual
//! knowledge base.
//!
//! Everything that affects results comes from the TOML run config; flags
//! and `VKB_*` environment variables only choose paths and verbosity.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vkb", version, about = "Multi-hop reasoning over a text corpus as a virtual KB")]
struct Cli {
    #[command(flatten)]
    paths: PathArgs,

    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct PathArgs {
    /// Run config (TOML); defaults apply when omitted.
    #[arg(long, env = "VKB_CONFIG", global = true)]
    pub config: Option<PathBuf>,

    /// Corpus, lexicon, KB and question files.
    #[arg(long, env = "VKB_DATA_DIR", default_value = "data", global = true)]
    pub data_dir: PathBuf,

    /// Matrices, checkpoints, indices, logs and reports.
    #[arg(long, env = "VKB_ARTIFACTS_DIR", default_value = "artifacts", global = true)]
    pub artifacts_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, lexicon, KB and questions.
    Datagen,
    /// Fit TFIDF and build the entity-mention and coreference matrices.
    Index {
        /// Also build the dense mention index from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain the mention encoder on slot filling and build the index.
    Pretrain,
    /// Train the query side end to end on the questions.
    Train,
    /// Answer one question with the trained model.
    Query(commands::QueryArgs),
    /// Hits@k of the trained model on the dev questions.
    Eval,
    /// Queries per second and Hits@1 across a K sweep.
    BenchQps,
    /// Follow-step latency at growing entity counts.
    BenchScaling,
    /// Paired runs toggling the TFIDF filter, lambda and aggregation.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        (false, _) => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Datagen => commands::datagen(&cli.paths),
        Command::Index { checkpoint } => commands::index(&cli.paths, checkpoint.as_deref()),
        Command::Pretrain => commands::pretrain(&cli.paths),
        Command::Train => commands::train(&cli.paths),
        Command::Query(args) => commands::query(&cli.paths, &args),
        Command::Eval => commands::eval(&cli.paths),
        Command::BenchQps => commands::bench_qps(&cli.paths),
        Command::BenchScaling => commands::bench_scaling(&cli.paths),
        Command::Ablate => commands::ablate(&cli.paths),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
