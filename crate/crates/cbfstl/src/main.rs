use clap::{Args, Parser, Subcommand};
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use cbfstl::cli::{load_scenario, run_pipeline, CliError, Command};

/// Compiles timed reach/stay tasks into control barrier tubes, plans
/// trajectories inside them, and checks the results against an independent
/// robustness monitor.
#[derive(Parser)]
#[command(name = "cbfstl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the planner iteration budget.
    #[arg(long)]
    iters: Option<usize>,
    /// Directory for output artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile the formula into barrier parameters and report margins.
    Encode(Common),
    /// Grow the planning tree and write the best trajectory.
    Plan(Common),
    /// Roll out the feedback controller inside the tube.
    Simulate(Common),
    /// Evaluate robustness of a trajectory CSV against the scenario formula.
    Monitor {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV to check; defaults to <out>/trajectory.csv.
        #[arg(long)]
        traj: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<serde_json::Value, CliError> {
    let (common, command) = match cmd {
        Cmd::Encode(c) => (c, Command::Encode),
        Cmd::Plan(c) => (c, Command::Plan),
        Cmd::Simulate(c) => (c, Command::Simulate),
        Cmd::Monitor { common, traj } => (common, Command::Monitor { traj }),
    };
    let mut scenario = load_scenario(&common.scenario)?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
        scenario.planner.seed = seed;
    }
    if let Some(iters) = common.iters {
        scenario.planner.n_max = iters;
    }
    run_pipeline(&scenario, &command, &common.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (summary, code) = match run(cli.command) {
        Ok(summary) => (summary, ExitCode::SUCCESS),
        Err(err) => (err.to_json(), ExitCode::FAILURE),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    // A reader that closes the pipe early (`cbfstl plan | head`) must not
    // turn the run into a panic; the exit code still reports the outcome.
    let _ = writeln!(io::stdout().lock(), "{text}");
    code
}
