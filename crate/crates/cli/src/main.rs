//! `secuav` — plan energy-efficient secure UAV-OFDMA missions from the shell.
//!
//! Exit codes: 0 success, 2 scenario validation failure, 3 solver failure,
//! 4 I/O failure. The `SECUAV_CONFIG` environment variable, when set,
//! overrides the config path argument (and nothing else).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use secuav_core::config::{self, ConfigError};
use secuav_core::model::{validate_scenario, Scenario};
use secuav_core::report::{self, Algorithm, RunError};

#[derive(Parser)]
#[command(name = "secuav", version, about = "Energy-efficient secure UAV-OFDMA planner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Proposed,
    Baseline,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Proposed => Algorithm::Proposed,
            AlgoArg::Baseline => Algorithm::Baseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a scenario config and report every violated invariant.
    Validate {
        /// Scenario config path (flat `key = value` lines).
        cfg: PathBuf,
    },
    /// Run one algorithm and write `report.json` + `meta.json`.
    Run {
        cfg: PathBuf,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the sampled robust check.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads (only sweeps parallelize; accepted here for
        /// interface symmetry).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Sweep uncertainty radii and peak powers over both algorithms,
    /// emitting one CSV table.
    Sweep {
        cfg: PathBuf,
        /// Comma-separated uncertainty radii in meters.
        #[arg(long, value_delimiter = ',', required = true)]
        radii: Vec<f64>,
        /// Comma-separated peak transmit powers in watts.
        #[arg(long, value_delimiter = ',', required = true)]
        ppeak: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Export the trajectory of a run report as CSV plus a JSON sidecar.
    #[command(name = "export-traj")]
    ExportTraj {
        /// Path to a `report.json` produced by `run`.
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn config_path(cfg: PathBuf) -> PathBuf {
    std::env::var_os("SECUAV_CONFIG").map(PathBuf::from).unwrap_or(cfg)
}

fn load(cfg: PathBuf) -> Result<Scenario, (u8, String)> {
    let path = config_path(cfg);
    config::load_config(&path).map_err(|e| match e {
        ConfigError::Io { .. } => (EXIT_IO, e.to_string()),
        _ => (EXIT_VALIDATION, e.to_string()),
    })
}

fn dispatch(cli: Cli) -> Result<(), (u8, String)> {
    match cli.command {
        Command::Validate { cfg } => {
            let sc = load(cfg)?;
            let diag = validate_scenario(&sc);
            println!("scenario valid: {} users, {} subcarriers, {} slots", sc.users, sc.subcarriers, sc.slots);
            println!(
                "secrecy guarantee: {} (margin {:.3} bit/s)",
                if diag.secrecy_guaranteed { "yes" } else { "no" },
                diag.secrecy_margin
            );
            Ok(())
        }
        Command::Run { cfg, algo, out, seed, workers: _ } => {
            let sc = load(cfg)?;
            let (run_report, meta) = report::run(&sc, algo.into(), seed).map_err(map_run_err)?;
            let report_json = serde_json::to_string_pretty(&run_report).expect("report serializes");
            let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
            write(&out.join("report.json"), report_json.as_bytes())?;
            write(&out.join("meta.json"), meta_json.as_bytes())?;
            println!(
                "{}: EE = {:.6} bit/J, converged = {}, robust margin = {:.3e}, wall = {} ms",
                run_report.algorithm, run_report.solution.ee, run_report.converged, run_report.robust_margin, meta.wall_ms
            );
            if !run_report.converged {
                return Err((EXIT_SOLVER, "run did not converge cleanly; see report.json".into()));
            }
            Ok(())
        }
        Command::Sweep { cfg, radii, ppeak, out, seed, workers } => {
            if radii.is_empty() || ppeak.is_empty() {
                return Err((EXIT_VALIDATION, "radii and ppeak lists must be non-empty".into()));
            }
            let sc = load(cfg)?;
            let table = report::sweep_radius(&sc, &radii, &ppeak, workers, seed);
            write(&out.join("sweep.csv"), table.to_csv().as_bytes())?;
            let json = serde_json::to_string_pretty(&table).expect("table serializes");
            write(&out.join("sweep.json"), json.as_bytes())?;
            let failures = table.rows.iter().filter(|r| r.error.is_some()).count();
            println!("sweep: {} cells, {} failures", table.rows.len(), failures);
            Ok(())
        }
        Command::ExportTraj { report: report_path, out } => {
            let text = std::fs::read_to_string(&report_path)
                .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", report_path.display())))?;
            let run_report: report::RunReport = serde_json::from_str(&text)
                .map_err(|e| (EXIT_VALIDATION, format!("malformed report: {e}")))?;
            report::verify_report(&run_report).map_err(map_run_err)?;
            report::export_trajectory(&run_report, &out).map_err(map_run_err)?;
            println!("wrote {} and sidecar", out.display());
            Ok(())
        }
    }
}

fn map_run_err(e: RunError) -> (u8, String) {
    match e {
        RunError::Io { .. } => (EXIT_IO, e.to_string()),
        RunError::Alternate(secuav_core::alternate::AlternateError::InvalidScenario(_)) => {
            (EXIT_VALIDATION, e.to_string())
        }
        RunError::Malformed(_) => (EXIT_VALIDATION, e.to_string()),
        _ => (EXIT_SOLVER, e.to_string()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), (u8, String)> {
    report::write_file(path, bytes).map_err(|e| (EXIT_IO, e.to_string()))
}
