//! `amcbf`: train, evaluate and verify adaptive multi-step CBF agents.

mod config;
mod error;
mod eval;
mod manifest;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use amcbf::envs::ScenarioName;
use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "amcbf", version, about = "Safe RL with learned class-K control barrier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents for one scenario, one worker per seed.
    Train(TrainArgs),
    /// Roll out a trained checkpoint without exploration noise.
    Eval(EvalArgs),
    /// Run the numerical property suite.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scenario: ScenarioName,
    /// Number of seeds to train.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First seed; seeds run from here upward.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Output root; the run goes to `<out>/<scenario>`.
    #[arg(long, env = "AMCBF_OUT", default_value = "runs")]
    out: PathBuf,
    /// TOML file with `[scenario]` and `[train]` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also record the linear class-K baseline on the same training tasks.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory, by default `eval/` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// First evaluation seed, by default the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    rollouts: usize,
    /// Rollout horizon, by default the scenario's episode length.
    #[arg(long)]
    steps: Option<usize>,
    /// Also roll out the linear class-K baseline on each task.
    #[arg(long)]
    baseline: bool,
    /// Write the learned class-K function on a grid over [-2, 2].
    #[arg(long)]
    export_kappa: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Reduced sample counts.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let config = config::resolve(args.scenario, args.config.as_deref(), args.episodes, args.steps)?;
    let seeds = (0..args.seeds as u64).map(|i| args.seed + i).collect();
    let out = args.out.join(args.scenario.as_str());
    let dir = train::cmd_train(train::TrainJob { config, seeds, out, baseline: args.baseline })?;
    println!("run written to {}", dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let dir = eval::cmd_eval(eval::EvalJob {
        checkpoint: args.checkpoint,
        out: args.out,
        seed: args.seed,
        rollouts: args.rollouts,
        steps: args.steps,
        baseline: args.baseline,
        export_kappa: args.export_kappa,
    })?;
    println!("evaluation written to {}", dir.display());
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), CliError> {
    let budget = if args.quick { verify::Budget::quick() } else { verify::Budget::full() };
    let started = Instant::now();
    let outcomes = verify::run_all(args.seed, budget);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!("{} properties, {failed} failed, {:.1}s", outcomes.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::PropertyFailure(failed, outcomes.len()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
