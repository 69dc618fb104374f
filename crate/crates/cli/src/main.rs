//! `lqsep`: runs scenarios from TOML configs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqsep::harness::{self, Scenario};

#[derive(Parser)]
#[command(name = "lqsep", version, about = "Partial-information LQ control experiments")]
struct Cli {
    /// Overrides `mc.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, estimate costs and write trajectory.csv and summary.csv.
    Run {
        config: PathBuf,
        /// Also run the invariant suite.
        #[arg(long)]
        check: bool,
    },
    /// Run the invariant suite and report pass/fail counts.
    Check { config: PathBuf },
    /// Estimate the cost for each value of one config key; writes sweep.csv.
    Sweep {
        config: PathBuf,
        /// Dotted key, e.g. `model.H`.
        #[arg(long)]
        param: String,
        /// Comma-separated TOML literals.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> lqsep::Result<Scenario> {
    let mut sc = harness::load_scenario(path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    Ok(sc)
}

/// Prints the suite and returns whether every check passed.
fn run_check(sc: &Scenario) -> lqsep::Result<bool> {
    let rep = harness::check(sc)?;
    for r in &rep.results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} passed, {} failed", rep.passed(), rep.failed());
    Ok(rep.failed() == 0)
}

fn execute(cli: Cli) -> lqsep::Result<bool> {
    match cli.command {
        Command::Run { config, check } => {
            let sc = load(&config, cli.seed)?;
            let rep = harness::run(&sc)?;
            for row in &rep.rows {
                println!(
                    "{:<20} analytic {:>24} estimate {:>24} stderr {:>24}",
                    row.quantity,
                    harness::format_number(row.analytic.unwrap_or(f64::NAN)),
                    harness::format_number(row.estimate.unwrap_or(f64::NAN)),
                    harness::format_number(row.stderr.unwrap_or(f64::NAN)),
                );
            }
            println!("wrote {} and {}", rep.trajectory.display(), rep.summary.display());
            if check {
                return run_check(&sc);
            }
            Ok(true)
        }
        Command::Check { config } => run_check(&load(&config, cli.seed)?),
        Command::Sweep { config, param, values } => {
            let text = std::fs::read_to_string(&config).map_err(|e| lqsep::Error::ConfigParse {
                path: config.display().to_string(),
                message: e.to_string(),
            })?;
            let mut table = harness::parse_table(&text)?;
            if let Some(s) = cli.seed {
                harness::set_dotted(&mut table, "mc.seed", &s.to_string())?;
            }
            for row in harness::sweep(&table, &param, &values)? {
                println!(
                    "{param} = {}: estimate {} stderr {}",
                    row.value,
                    harness::format_number(row.estimate.mean),
                    harness::format_number(row.estimate.stderr)
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
