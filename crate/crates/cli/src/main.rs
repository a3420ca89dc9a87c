use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regsim_cli::{
    check_trace, exit, explore_and_check, load_config, parse_ops, run_options_from_env,
    run_scenario, sweep, CliError, RunReport,
};
use regsim_core::sim::explore::{ExploreSpec, DEFAULT_MAX_STATES};
use regsim_core::sim::{Algorithm, Trace};
use regsim_core::ProcessId;

#[derive(Parser)]
#[command(
    name = "regsim",
    version,
    about = "Simulate and check SWMR atomic register protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario, write its trace and report.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace output (JSONL).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report output (JSON). Printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Exhaustively explore a small instance and check every history.
    Explore {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        t: usize,
        /// Operations, e.g. `w,r2,r3` (`w:VALUE` names the value).
        #[arg(long)]
        ops: String,
        #[arg(long, default_value_t = DEFAULT_MAX_STATES)]
        max_states: usize,
        #[arg(long, value_parser = parse_algorithm, default_value = "teff-modified")]
        algorithm: Algorithm,
        /// Let the writer crash during any of its broadcasts.
        #[arg(long)]
        crash_writer: bool,
    },
    /// Run a scenario under many seeds and aggregate the bounds.
    Sweep {
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        /// Report output (JSON). Printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a stored trace; with its config, regenerate the full report.
    Check {
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| format!("unknown algorithm {s:?}; expected teff, teff-modified or abd"))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&Path>, json: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn verdict(pass: bool) -> u8 {
    if pass {
        exit::PASS
    } else {
        exit::CHECK_FAILED
    }
}

fn execute(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            report,
        } => {
            let mut cfg = load_config(&read(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = run_scenario(&cfg, run_options_from_env()?)?;
            if let Some(out) = &out {
                write(out, &outcome.trace.to_jsonl())?;
            }
            emit(report.as_deref(), &outcome.report.to_json())?;
            eprintln!(
                "{} seed {}: {}",
                config.display(),
                cfg.seed,
                if outcome.report.pass { "PASS" } else { "FAIL" }
            );
            Ok(verdict(outcome.report.pass))
        }
        Command::Explore {
            n,
            t,
            ops,
            max_states,
            algorithm,
            crash_writer,
        } => {
            let writer = ProcessId(1);
            let mut spec = ExploreSpec::new(n, t, algorithm, parse_ops(&ops, writer)?);
            if crash_writer {
                spec.crashable = vec![writer];
            }
            let summary = explore_and_check(&spec, max_states)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            Ok(verdict(summary.pass))
        }
        Command::Sweep {
            config,
            seeds,
            first_seed,
            report,
        } => {
            let cfg = load_config(&read(&config)?)?;
            let r = sweep(&cfg, first_seed, seeds, run_options_from_env()?)?;
            let mut json = serde_json::to_string_pretty(&r).expect("report serializes");
            json.push('\n');
            emit(report.as_deref(), &json)?;
            if let Some(seed) = r.failing_seeds.first() {
                eprintln!(
                    "{}: {} of {} seeds failed; reproduce with `regsim run {} --seed {seed}`",
                    config.display(),
                    r.failing_seeds.len(),
                    r.runs,
                    config.display()
                );
            }
            Ok(verdict(r.pass))
        }
        Command::Check {
            trace,
            config,
            report,
        } => {
            let trace = Trace::from_jsonl(&read(&trace)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", trace.display())))?;
            match config {
                Some(path) => {
                    let cfg = load_config(&read(&path)?)?;
                    let r = RunReport::build(&cfg, &trace)?;
                    emit(report.as_deref(), &r.to_json())?;
                    Ok(verdict(r.pass))
                }
                None => {
                    let r = check_trace(&trace)?;
                    let mut json = serde_json::to_string_pretty(&r).expect("report serializes");
                    json.push('\n');
                    emit(report.as_deref(), &json)?;
                    Ok(verdict(r.pass))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::CONFIG_ERROR
            } else {
                exit::PASS
            });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
