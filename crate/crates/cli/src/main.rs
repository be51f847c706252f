mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use config::{EngineChoice, LoadedConfig};
use error::{CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "siltwin", version, about = "Lifecycle security digital twin: simulate, detect, infer root causes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Paths inside it are relative to the file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "siltwin-out")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean fleet with its test records.
    Simulate(Common),
    /// Apply the configured attacks to a fleet.
    Inject(Common),
    /// Extract per-device and fleet evidence.
    Detect(Common),
    /// Rank root causes for an observation.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        engine: Option<EngineChoice>,
    },
    /// Extend the threat model with a knowledge update.
    Extend(Common),
    /// Run an end-to-end scenario.
    RunScenario {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: Option<u8>,
    },
    /// Render a saved report as text and CSV.
    Report(Common),
}

fn ctx(c: &Common) -> CliResult<Ctx> {
    Ok(Ctx {
        cfg: LoadedConfig::load(c.config.as_deref(), c.seed)?,
        out: c.out.clone(),
        force: c.force,
    })
}

fn run(cmd: &Command) -> CliResult<String> {
    match cmd {
        Command::Simulate(c) => commands::simulate(&ctx(c)?),
        Command::Inject(c) => commands::inject(&ctx(c)?),
        Command::Detect(c) => commands::detect(&ctx(c)?),
        Command::Infer { common, engine } => commands::infer(&ctx(common)?, *engine),
        Command::Extend(c) => commands::extend(&ctx(c)?),
        Command::RunScenario { common, scenario } => commands::run_scenario(&ctx(common)?, *scenario),
        Command::Report(c) => commands::report(&ctx(c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK } as u8);
        }
    };
    match run(&cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
