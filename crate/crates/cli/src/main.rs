//! Command-line front end: one subcommand per experiment type, each taking a
//! JSON config and an output directory. Exit codes: 0 pass, 1 statistical
//! failure, 2 config/usage error, 3 numerical fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wqt_core::experiments::{run_config_str, ExperimentConfig, Outcome, RunResult, CONFIG_SCHEMA};
use wqt_core::Error;

#[derive(Parser)]
#[command(
    name = "wqt",
    version,
    about = "Lattice quantum dynamics driven by density matrices: guided trajectories, spontaneous collapse, macrostate entropy"
)]
struct Cli {
    /// Print the config schema and exit.
    #[arg(long)]
    schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,

    /// Directory for output artifacts (created if missing).
    #[arg(long)]
    out: PathBuf,

    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a state and record conserved quantities and curves.
    Evolve(RunArgs),
    /// Trajectory ensembles with per-checkpoint histogram comparison.
    Bohm(RunArgs),
    /// Spontaneous-collapse runs with a flash record.
    Grw(RunArgs),
    /// Macro occupation and entropy curves with band/floor checks.
    Entropy(RunArgs),
    /// Two-arm statistical equivalence of guidance laws.
    Equiv(RunArgs),
    /// Prepare and evolve the uniform state on one macro cell.
    Prepare(RunArgs),
}

impl Command {
    fn expected_tag(&self) -> &'static str {
        match self {
            Command::Evolve(_) => "evolve",
            Command::Bohm(_) => "bohm",
            Command::Grw(_) => "grw",
            Command::Entropy(_) => "entropy",
            Command::Equiv(_) => "equivalence",
            Command::Prepare(_) => "prepare",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Evolve(a)
            | Command::Bohm(a)
            | Command::Grw(a)
            | Command::Entropy(a)
            | Command::Equiv(a)
            | Command::Prepare(a) => a,
        }
    }
}

fn run(command: &Command) -> wqt_core::Result<RunResult> {
    let args = command.args();
    let text = std::fs::read_to_string(&args.config)?;
    let cfg = ExperimentConfig::parse(&text)?;
    if cfg.tag() != command.expected_tag() {
        return Err(Error::Config(format!(
            "config declares experiment '{}', but the '{}' subcommand was invoked",
            cfg.tag(),
            command.expected_tag()
        )));
    }
    run_config_str(&text, &args.out, args.seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.schema {
        print!("{CONFIG_SCHEMA}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no subcommand given; try --help or --schema");
        return ExitCode::from(2);
    };
    match run(&command) {
        Ok(result) => {
            let out = command.args().out.display();
            for file in &result.files {
                println!("wrote {out}/{file}");
            }
            match result.outcome {
                Outcome::Pass => {
                    println!("outcome: pass");
                    ExitCode::SUCCESS
                }
                Outcome::StatFail => {
                    println!("outcome: statistical check failed");
                    ExitCode::from(1)
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
