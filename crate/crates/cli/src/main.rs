use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use parafreq::config::{parse_scenario_config, Scenario};
use parafreq::report::{emit_report, Format};
use parafreq::run_scenario;
use parafreq::suite::{verify_suite, Override, SizeClass};
use parafreq_core::spectrum::{eigendecompose, EigenCount};

/// Discrete parabolic frequency flows: scenario runner and verification suite.
#[derive(Parser)]
#[command(name = "parafreq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the configured `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed, overriding the configured one.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the canned acceptance scenarios.
    Verify {
        #[arg(long, default_value = "small")]
        suite: SizeClass,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "parafreq-verify")]
        out: PathBuf,
        /// Tolerance override `NAME=VALUE`; repeatable.
        #[arg(long = "tol")]
        tol: Vec<Override>,
    },
    /// Print the eigenvalues of the configured domain as CSV.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXECUTION_ERROR: u8 = 2;

fn load(path: &PathBuf, seed: Option<u64>) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let config = parse_scenario_config(&text).map_err(|e| e.to_string())?;
    Scenario::from_config(config, seed).map_err(|e| e.to_string())
}

fn execute(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let scenario = load(&config, seed)?;
            let out = out
                .or_else(|| scenario.config.output.as_ref().map(PathBuf::from))
                .ok_or("no output directory: pass --out or set `output` in the config")?;
            let report = run_scenario(&scenario, &out).map_err(|e| e.to_string())?;
            for d in &report.diagnostics {
                eprintln!("{d}");
            }
            print!("{}", emit_report(&report, Format::Text));
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Verify { suite, seed, out, tol } => {
            let outcome = verify_suite(seed, suite, &tol, &out).map_err(|e| e.to_string())?;
            for d in &outcome.report.diagnostics {
                eprintln!("{d}");
            }
            print!("{}", emit_report(&outcome.report, Format::Text));
            Ok(outcome.exit_code() as u8)
        }
        Command::Spectrum { config } => {
            let scenario = load(&config, None)?;
            let spectrum = eigendecompose(&scenario.domain, EigenCount::All).map_err(|e| e.to_string())?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            spectrum
                .write_eigenvalues_csv(&mut lock)
                .and_then(|_| lock.flush())
                .map_err(|e| e.to_string())?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXECUTION_ERROR)
        }
    }
}
