//! Command-line entry point: generate games, run experiments, evaluate
//! stored policies, and self-test the statistical building blocks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use markov_cce::cli;
use markov_cce::config::{Embedding, ExperimentConfig, GeneratorSpec};

#[derive(Parser)]
#[command(
    name = "markov-cce",
    about = "Learn coarse correlated equilibria in layered Markov games \
             with independent linear function approximation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic game and write it as a JSON game spec.
    GenGame(GenGameArgs),
    /// Run an experiment from a JSON configuration file.
    Run(RunArgs),
    /// Evaluate a stored policy file against a game (exact oracle).
    Eval(EvalArgs),
    /// Verify the statistical building blocks with Monte-Carlo suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenGameArgs {
    /// Root seed of the generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of agents.
    #[arg(long, default_value_t = 2)]
    agents: usize,
    /// Horizon (number of decision layers).
    #[arg(long, default_value_t = 2)]
    horizon: usize,
    /// States per decision layer.
    #[arg(long, default_value_t = 2)]
    states: usize,
    /// Action count per agent (repeat or comma-separate; one value is
    /// broadcast to all agents).
    #[arg(long, value_delimiter = ',', default_values_t = [2usize])]
    actions: Vec<usize>,
    /// Feature dimension (defaults to the embedding's minimum).
    #[arg(long)]
    dim: Option<usize>,
    /// Feature embedding: "one-hot" or "low-rank".
    #[arg(long, default_value = "one-hot")]
    embedding: String,
    /// Output path for the game spec JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configuration's worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the configuration's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Game spec JSON.
    #[arg(long)]
    game: PathBuf,
    /// Policy file produced by `run`.
    #[arg(long)]
    policy: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Suites to run (default: all).
    #[arg(long, value_delimiter = ',')]
    suite: Vec<String>,
    /// Root seed of the Monte-Carlo experiments.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::GenGame(args) => {
            let embedding = match args.embedding.as_str() {
                "one-hot" => Embedding::OneHot,
                "low-rank" => Embedding::LowRank,
                other => anyhow::bail!("unknown embedding {other:?} (one-hot | low-rank)"),
            };
            let actions = if args.actions.len() == 1 {
                vec![args.actions[0]; args.agents]
            } else {
                args.actions.clone()
            };
            let spec = GeneratorSpec {
                seed: args.seed,
                m: args.agents,
                h: args.horizon,
                states_per_layer: args.states,
                actions,
                d: args.dim,
                embedding,
            };
            let (residual, findings) = cli::cmd_gen_game(&spec, &args.out)?;
            for f in findings {
                eprintln!("{f}");
            }
            println!(
                "wrote {} (linear factorization residual {residual:.3e})",
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => {
            let text = std::fs::read_to_string(&args.config)
                .with_context(|| format!("reading config {}", args.config.display()))?;
            let mut config: ExperimentConfig =
                serde_json::from_str(&text).context("parsing config")?;
            if let Some(seed) = args.seed {
                config.seeds = vec![seed];
            }
            if let Some(workers) = args.workers {
                config.workers = workers;
            }
            let out_dir = args
                .out
                .or_else(|| config.out.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let runs = cli::cmd_run(&config, &out_dir)?;
            for run in &runs {
                let cp = run.checkpoints.last().expect("checkpoint");
                println!(
                    "seed {}: final max regret {:.4} over {} epochs ({} rebuilds)",
                    run.seed,
                    cp.max_regret,
                    config.t,
                    run.records.last().map_or(0, |r| r.violations),
                );
            }
            println!("outputs in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let report = cli::cmd_eval(&args.game, &args.policy)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest(args) => {
            let reports = cli::cmd_selftest(&args.suite, args.seed)?;
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "{} {}: {}/{} (need {}) — {}",
                    if r.ok { "PASS" } else { "FAIL" },
                    r.name,
                    r.passed,
                    r.total,
                    r.threshold,
                    r.details
                );
                all_ok &= r.ok;
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
