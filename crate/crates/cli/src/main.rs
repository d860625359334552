mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpformer::retrieval::SearchMode;

#[derive(Parser)]
#[command(name = "mpformer", version, about = "Multi-objective sequential retriever")]
struct Cli {
    /// Run configuration file (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.d=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world and write the dataset files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Replace existing dataset files.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint's parameters, optimizer state and step.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step JSONL log; defaults to `<out>/train_log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Also save the checkpoint every this many steps.
        #[arg(long)]
        save_every: Option<u64>,
        /// Run the finite-difference gradient check and exit.
        #[arg(long)]
        grad_check: bool,
    },
    /// Build the per-objective indices and item weight store.
    BuildIndex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Answer line-delimited JSON requests on stdin, or on TCP with `--tcp`.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Listen address; `serving.addr` when given without a value.
        #[arg(long, num_args = 0..=1, default_missing_value = "")]
        tcp: Option<String>,
    },
    /// Answer one request and print the response line.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Request JSON; alternatively use `--user` with `--data`.
        #[arg(long, conflicts_with = "user")]
        request: Option<String>,
        /// Build the request from this user's history at the holdout boundary.
        #[arg(long, requires = "data")]
        user: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        q_total: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Offline metrics on the holdout day, cost table and similarity probe.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also rank within these indices.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Directory for report files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the attention projection cost of independent vs shared QKV.
    Bench {
        #[arg(long, default_value_t = 64)]
        n: u64,
        #[arg(long, default_value_t = 32)]
        d: u64,
        #[arg(long, default_value_t = 3)]
        k: u64,
        #[arg(long, default_value_t = 1)]
        layers: u64,
        /// Also tabulate K = 1..=max_k.
        #[arg(long)]
        max_k: Option<u64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Exact,
    Approx,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => SearchMode::Exact,
            ModeArg::Approx => SearchMode::Approx,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
