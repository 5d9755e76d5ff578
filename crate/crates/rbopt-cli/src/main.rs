use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rbopt_cli::{
    resolve_out_dir, run_assemble, run_build, run_evaluate, run_reference_check, run_report,
    ExperimentConfig, EXIT_CONFIG, EXIT_NOT_CONVERGED,
};

#[derive(Parser)]
#[command(
    name = "rbopt",
    about = "Certified reduced-order models for parametrized LQ optimal control",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the benchmark and export its Matrix Market bundle.
    Assemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Additionally run the full-order reference behavior check.
        #[arg(long)]
        check: bool,
    },
    /// Build the selected reduced model and write archive + greedy logs.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a model archive on the seeded test set.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate an evaluation CSV into a report table.
    Report {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Assemble { config, out, check } => {
            let cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            let out = resolve_out_dir(out.as_deref(), "assemble");
            match run_assemble(&cfg, &out) {
                Ok(()) => {
                    eprintln!("assembled benchmark bundle in {}", out.display());
                    if check {
                        match run_reference_check(&cfg, &out) {
                            Ok(ok) => {
                                eprintln!(
                                    "reference behavior check: {}",
                                    if ok { "pass" } else { "FAIL (reported, artifacts kept)" }
                                );
                                0
                            }
                            Err(e) => return run_error(e),
                        }
                    } else {
                        0
                    }
                }
                Err(e) => return run_error(e),
            }
        }
        Command::Build { config, out } => {
            let cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            let out = resolve_out_dir(out.as_deref(), cfg.strategy.name());
            match run_build(&cfg, &out) {
                Ok(outcome) => {
                    if let Some(log) = &outcome.log {
                        eprintln!(
                            "build {}: converged={} iterations={} fom_solves={} ({}).",
                            cfg.strategy.name(),
                            log.converged,
                            log.iterations.len(),
                            log.fom_solves,
                            out.display()
                        );
                    }
                    if outcome.converged {
                        0
                    } else {
                        EXIT_NOT_CONVERGED
                    }
                }
                Err(e) => return run_error(e),
            }
        }
        Command::Evaluate { config, archive, out } => {
            let cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            let out = resolve_out_dir(out.as_deref(), &format!("{}-eval", cfg.strategy.name()));
            match run_evaluate(&cfg, &archive, &out) {
                Ok(outcome) => {
                    eprintln!(
                        "evaluated {} parameters; mean estimate {:.3e}; results in {}",
                        outcome.rows.len(),
                        outcome.aggregate.mean_estimate,
                        out.display()
                    );
                    0
                }
                Err(e) => return run_error(e),
            }
        }
        Command::Report { rows, out } => match run_report(&rows, out.as_deref()) {
            Ok(table) => {
                print!("{table}");
                0
            }
            Err(e) => return run_error(e),
        },
    };
    ExitCode::from(code as u8)
}

fn config_error(e: rbopt::Error) -> ExitCode {
    eprintln!("configuration error: {e}");
    ExitCode::from(EXIT_CONFIG as u8)
}

fn run_error(e: rbopt::Error) -> ExitCode {
    match e {
        rbopt::Error::InvalidConfig(_) => config_error(e),
        other => {
            eprintln!("error: {other}");
            ExitCode::from(1)
        }
    }
}
