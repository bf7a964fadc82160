//! Command-line front end tying data generation, training, evaluation,
//! probing, and benchmarking into reproducible experiments. One experiment =
//! one JSON config; every command writes its artifacts plus a manifest under
//! the config's output directory.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.

mod config;
mod manifest;
mod runner;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "invlab", version, about = "Inventory-control experiments: differentiable training and classical benchmarks")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override every seed in the config (data, eval data, training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample products and demand traces to CSV.
    GenData,
    /// Train a policy (or quantile forecaster) and write a checkpoint.
    Train,
    /// Evaluate a checkpoint or named heuristic on the test population.
    Eval {
        /// Checkpoint path; mutually exclusive with --heuristic.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Heuristic name (e.g. omniscient_newsvendor, vector_base_stock).
        #[arg(long)]
        heuristic: Option<String>,
    },
    /// Probe a checkpoint's actions over an endogenous grid.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate the applicable heuristics (and optionally a checkpoint) and
    /// emit a comparison table.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("error: could not configure {threads} worker threads");
            return ExitCode::from(2);
        }
    }
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required");
            return ExitCode::from(2);
        }
    };
    let configs = match config::load_configs(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let mut code = ExitCode::SUCCESS;
    for mut cfg in configs {
        if let Some(out) = &cli.output {
            // with a sweep, children keep their derived suffix under the override
            cfg.output_dir = if cfg.output_dir.components().count() > 0 {
                match cfg.output_dir.file_name() {
                    Some(name) if name.to_string_lossy().starts_with("sweep_") => out.join(name),
                    _ => out.clone(),
                }
            } else {
                out.clone()
            };
        }
        if let Some(seed) = cli.seed {
            cfg.data.seed = seed;
            cfg.data.eval_seed = seed.wrapping_add(0x9e37);
            cfg.train.seed = seed.wrapping_add(0x79b9);
        }
        let outcome = match &cli.command {
            Command::GenData => runner::cmd_gen_data(&cfg),
            Command::Train => runner::cmd_train(&cfg),
            Command::Eval { checkpoint, heuristic } => {
                runner::cmd_eval(&cfg, checkpoint.as_deref(), heuristic.as_deref())
            }
            Command::Probe { checkpoint } => runner::cmd_probe(&cfg, checkpoint),
            Command::Bench { checkpoint } => runner::cmd_bench(&cfg, checkpoint.as_deref()),
        };
        match outcome {
            Ok(()) => {}
            Err(e) => {
                eprintln!("error: {e:#}");
                let usage = e
                    .downcast_ref::<invlab::Error>()
                    .map(|le| {
                        matches!(
                            le,
                            invlab::Error::Usage(_)
                                | invlab::Error::Config(_)
                                | invlab::Error::Parse { .. }
                        )
                    })
                    .unwrap_or_else(|| e.to_string().contains("invalid config"));
                code = ExitCode::from(if usage { 2 } else { 1 });
                break;
            }
        }
    }
    code
}
