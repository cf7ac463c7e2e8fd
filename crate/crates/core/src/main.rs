use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use activeslam::config::TrialConfig;
use activeslam::experiments::{compare_methods, load_trials, run_trial, write_report, TrialSpec};
use activeslam::worlds;
use activeslam::Error;

#[derive(Parser)]
#[command(
    name = "activeslam",
    version,
    about = "Active visual SLAM exploration simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and write its outputs into a directory.
    Run {
        /// Builtin world name or path to a `.world` sidecar.
        #[arg(long)]
        world: String,
        /// Method name, e.g. A, A_1, OL_2_3, INTER_0.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated seconds.
        #[arg(long, default_value_t = 150.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
        /// Flat key = value configuration file (see docs/config.md).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Aggregate every trial directory below `--runs` into a report.
    Compare {
        #[arg(long)]
        runs: PathBuf,
        /// Text table path; a CSV is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Bundled worlds.
    Worlds {
        #[command(subcommand)]
        command: WorldsCommand,
    },
}

#[derive(Subcommand)]
enum WorldsCommand {
    /// List the builtin worlds.
    List,
    /// Write a builtin world as PGM + sidecar.
    Export {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_FAILED: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::UnknownMethod(_)
            | Error::UnknownWorld(_)
            | Error::Format { .. }
            | Error::ProbabilityDomain(_)
    )
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    if config_error(&e) {
        ExitCode::from(EXIT_CONFIG)
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            world,
            method,
            seed,
            duration,
            out,
            config,
        } => {
            let cfg = match config.map(|p| TrialConfig::load(&p)).transpose() {
                Ok(c) => c.unwrap_or_default(),
                Err(e) => return fail(e),
            };
            let spec = TrialSpec {
                world,
                method,
                seed,
                duration,
            };
            let result = match run_trial(&spec, &cfg) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            if let Err(e) = result.write(&out) {
                return fail(e);
            }
            let s = &result.summary;
            println!(
                "{} {} seed {}: coverage {:.3}, BAC {:.3}, H_norm {:.3}, path {:.1} m, closures {}, ATE {:.3} m",
                s.world, s.method, s.seed, s.final_coverage, s.final_bac, s.final_normalized_entropy, s.final_path_length, s.closures, s.final_ate_rmse
            );
            if s.failed() {
                eprintln!("trial failed: {:?}", s.outcome);
                return ExitCode::from(EXIT_FAILED);
            }
            ExitCode::SUCCESS
        }
        Command::Compare { runs, report } => {
            let trials = match load_trials(&runs) {
                Ok(t) => t,
                Err(e) => return fail(e),
            };
            if trials.is_empty() {
                eprintln!("error: no trial directories under {}", runs.display());
                return ExitCode::from(EXIT_CONFIG);
            }
            let r = compare_methods(&trials);
            if let Err(e) = write_report(&r, &report) {
                return fail(e);
            }
            print!("{}", activeslam::experiments::render_text(&r));
            ExitCode::SUCCESS
        }
        Command::Worlds {
            command: WorldsCommand::List,
        } => {
            for name in worlds::BUILTIN_WORLDS {
                match worlds::builtin(name) {
                    Ok(w) => println!(
                        "{name}\t{:.1} x {:.1} m\t{} features",
                        w.width() as f64 * w.resolution(),
                        w.height() as f64 * w.resolution(),
                        w.features.len()
                    ),
                    Err(e) => return fail(e),
                }
            }
            ExitCode::SUCCESS
        }
        Command::Worlds {
            command: WorldsCommand::Export { name, out },
        } => match worlds::builtin(&name).and_then(|w| worlds::export(&w, &out)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
    }
}
