//! `darn`: synthetic data generation, training, feature extraction,
//! indexing, querying, evaluation, ablation and gradient checking.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "darn", version, about = "Dual attribute-aware ranking network pipeline")]
struct Cli {
    /// Worker threads for extraction and querying (0 = one per core).
    #[arg(long, global = true, env = "DARN_THREADS", default_value_t = 0)]
    threads: usize,

    /// Log level: error, warn, info, debug.
    #[arg(long, global = true, env = "DARN_LOG", default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, env = "DARN_CONFIG")]
    pub config: Option<PathBuf>,

    /// Output directory (receives the resolved config.json).
    #[arg(long, env = "DARN_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(commands::GenDataArgs),
    /// Train a dual (or shared) network on the training split.
    Train(commands::TrainArgs),
    /// Extract gallery and query features from a checkpoint.
    Extract(commands::ExtractArgs),
    /// Build a gallery index from a feature file.
    Index(commands::IndexArgs),
    /// Rank a gallery for one or more query vectors.
    Query(commands::QueryArgs),
    /// Top-k accuracy and NDCG of a checkpoint on the test split.
    Evaluate(commands::EvaluateArgs),
    /// Train and evaluate the baseline ladder.
    Ablate(commands::AblateArgs),
    /// Finite-difference check of every primitive and the full objective.
    GradCheck(commands::GradCheckArgs),
}

fn exit_code(category: &str) -> u8 {
    match category {
        "io" => 3,
        "config" => 4,
        "format" | "validation" => 5,
        "dimension" | "contract" | "label-range" | "build" => 6,
        "sampling" => 7,
        "numeric" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .expect("thread pool configured once");
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Extract(a) => commands::extract(a),
        Command::Index(a) => commands::index(a),
        Command::Query(a) => commands::query(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}
