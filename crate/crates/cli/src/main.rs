//! `dirrec`: train and inspect recommenders whose items live on a shared
//! attribute tensor. Exit status is 0 on success, 1 on runtime failures, and
//! 2 on usage or configuration errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::ExportTarget;
use dirrec_core::error::DirError;

#[derive(Parser)]
#[command(
    name = "dirrec",
    version,
    about = "Recommenders over attribute-factored item representations"
)]
struct Cli {
    /// Config file: one `key = value` per line, lists comma-separated
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config seed (train) or the evaluation sampling seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory artifacts are written to
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    /// Worker threads for evaluation scoring; 0 means all cores
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse interaction and item files into a serialized catalog
    Ingest {
        /// One `user_id<TAB>item_id<TAB>unix_timestamp` per line
        #[arg(long, value_name = "PATH")]
        interactions: PathBuf,
        /// One `item_id<TAB>category/path<TAB>price` per line (price may be NA)
        #[arg(long, value_name = "PATH")]
        items: PathBuf,
        /// Keep only this many users, sampled uniformly before filtering
        #[arg(long, value_name = "N")]
        sample_users: Option<usize>,
    },
    /// Run the alternating training loop described by --config
    Train {
        /// Serialized catalog; overrides the config's `catalog` key
        #[arg(long, value_name = "PATH")]
        catalog: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out events
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// The catalog the checkpoint was trained on
        #[arg(long, value_name = "PATH")]
        catalog: PathBuf,
        /// Which held-out event to score: test | validation
        #[arg(long, default_value = "test")]
        phase: String,
        /// Print the warm-start aggregate
        #[arg(long)]
        warm: bool,
        /// Print the cold-start aggregate
        #[arg(long)]
        cold: bool,
        /// Compute the AUC-by-cold-fraction sweep and write it as CSV
        #[arg(long)]
        sweep: bool,
        /// Negatives sampled per user; 0 scores all of them
        #[arg(long, value_name = "N")]
        negative_cap: Option<usize>,
    },
    /// Redo one allocation pass with the checkpoint's parameters frozen
    Reallocate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        catalog: PathBuf,
    },
    /// Dump checkpoint contents as CSV
    Export {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        catalog: PathBuf,
        /// What to export
        #[arg(long, value_enum)]
        what: ExportTarget,
        /// Comma-separated user ids (rankings export)
        #[arg(long, value_name = "IDS")]
        users: Option<String>,
        /// List length per ranking (rankings export)
        #[arg(long, default_value_t = 5, value_name = "K")]
        top_k: usize,
        /// Sequence context for rankings: test | validation
        #[arg(long, default_value = "test")]
        phase: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("DIRREC_LOG_LEVEL", "warn"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for errors the caller can fix on the command line (bad config, missing
/// input file), 1 for failures inside a run.
fn exit_code(err: &DirError) -> u8 {
    match err {
        DirError::Config(_) => 2,
        DirError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> dirrec_core::error::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| DirError::Invalid(format!("thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|source| DirError::Io {
        path: cli.out.clone(),
        source,
    })?;

    match cli.command {
        Command::Ingest {
            interactions,
            items,
            sample_users,
        } => commands::cmd_ingest(&interactions, &items, sample_users, cli.seed, &cli.out),
        Command::Train { catalog } => {
            let config_path = cli.config.ok_or_else(|| {
                DirError::Config(vec!["train needs --config PATH".to_string()])
            })?;
            let file_config = config::load_config(&config_path)?;
            commands::cmd_train(file_config, catalog, cli.seed, &cli.out)
        }
        Command::Evaluate {
            checkpoint,
            catalog,
            phase,
            warm,
            cold,
            sweep,
            negative_cap,
        } => commands::cmd_evaluate(
            &checkpoint,
            &catalog,
            &phase,
            warm,
            cold,
            sweep,
            negative_cap,
            cli.seed,
            &cli.out,
        ),
        Command::Reallocate { checkpoint, catalog } => {
            commands::cmd_reallocate(&checkpoint, &catalog, &cli.out)
        }
        Command::Export {
            checkpoint,
            catalog,
            what,
            users,
            top_k,
            phase,
        } => commands::cmd_export(&checkpoint, &catalog, what, users, top_k, &phase, &cli.out),
    }
}
