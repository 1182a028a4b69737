//! `opensys run|validate|compare <scenario.json>`
//!
//! Exit codes: 0 ok, 2 invalid scenario, 3 runtime failure, 4 budget exceeded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use opensys::harness::{parse_scenario, run_scenario, HarnessError, RunOptions};

#[derive(Parser)]
#[command(name = "opensys", version, about = "Run open-system dynamics scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory the output paths of the scenario are relative to.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Record wall time in the summary (outputs are then no longer reproducible).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario and write its trajectory and summary.
    Run { scenario: PathBuf },
    /// Parse and check the scenario without running it.
    Validate { scenario: PathBuf },
    /// Like `run`, with the reference-solution distance always included.
    Compare { scenario: PathBuf },
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let (path, force_oracle) = match &cli.command {
        Command::Validate { scenario } => {
            parse_scenario(scenario)?;
            info!("{}: ok", scenario.display());
            return Ok(());
        }
        Command::Run { scenario } => (scenario, false),
        Command::Compare { scenario } => (scenario, true),
    };
    let loaded = parse_scenario(path)?;
    let opts = RunOptions { output_dir: cli.output_dir.clone(), force_oracle, timing: cli.timing };
    let written = run_scenario(&loaded, &opts)?;
    for a in &written.advisories {
        warn!("{a}");
    }
    info!("wrote {} and {}", written.trajectory.display(), written.summary.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).format_target(false).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
