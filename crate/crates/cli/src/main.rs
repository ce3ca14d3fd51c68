use std::path::PathBuf;
use std::process::ExitCode;

use adnlab::run::{parse_grid, run, Command, RunOptions};
use adnlab::scenario::load_scenario;
use clap::Parser;

const EXIT_FAILURE: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// Bifurcation, secondary-control and complex-frequency analyses of
/// converter-dominated distribution networks.
#[derive(Debug, Parser)]
#[command(name = "adnlab", version)]
struct Args {
    /// equilibrium | continue | boundary2d | simulate | secondary | cf
    command: String,
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Continuation parameter, overriding the scenario's.
    #[arg(long)]
    param: Option<String>,
    /// Second-parameter grid for boundary2d as start:end:count.
    #[arg(long, value_parser = parse_grid_arg)]
    grid: Option<Grid>,
    /// Continuation step budget, or number of time steps for simulate/cf.
    #[arg(long)]
    steps: Option<usize>,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone)]
struct Grid(Vec<f64>);

fn parse_grid_arg(s: &str) -> Result<Grid, String> {
    parse_grid(s).map(Grid)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let command: Command = match args.command.parse() {
        Ok(c) => c,
        Err(msg) => {
            let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
            eprintln!("error: {msg}\n\nusage: adnlab <{}> --scenario <path> --out <dir> [--param NAME] [--grid a:b:n] [--steps N] [--quiet]", names.join("|"));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    let opts = RunOptions { param: args.param, grid: args.grid.map(|g| g.0), steps: args.steps, quiet: args.quiet };
    match run(command, &scenario, &args.out, &opts) {
        Ok(m) => {
            if !opts.quiet {
                for o in &m.outputs {
                    eprintln!("wrote {} ({} bytes)", args.out.join(&o.file).display(), o.bytes);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {command_name}: {e}", command_name = command.name());
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
