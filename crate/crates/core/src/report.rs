//! Run reports, parameter sweeps and trajectory export. Reports are plain
//! serde structures: identical configs and seeds serialize byte-identically,
//! so wall-clock timing lives in a separate metadata struct.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alternate::{self, AlternateError, AlternationTrace};
use crate::model::{self, norm, ModelError, Residual, Scenario, Schedule, Solution};
use crate::oracles;
use crate::sched;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Alternate(#[from] AlternateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Proposed,
    Baseline,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Algorithm::Proposed => write!(f, "proposed"),
            Algorithm::Baseline => write!(f, "baseline"),
        }
    }
}

/// Everything a run produces, minus wall-clock timing (see [`RunMeta`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Scenario echo with all units resolved to SI.
    pub scenario: Scenario,
    pub trace: AlternationTrace,
    pub solution: Solution,
    /// Per-slot transmit power, W.
    pub slot_tx_power: Vec<f64>,
    /// Per-user average rates, bit/s.
    pub user_rates: Vec<f64>,
    /// Sampled worst-case leakage margin (includes the analytic worst point).
    pub robust_margin: f64,
    pub secrecy_guaranteed: bool,
    pub converged: bool,
}

/// Non-deterministic run metadata, written alongside the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub schema_version: u32,
    pub wall_ms: u128,
}

/// Executes one algorithm on a scenario and assembles the report. The
/// sampled robust check always runs and its margin is part of the report.
pub fn run(sc: &Scenario, algorithm: Algorithm, seed: u64) -> Result<(RunReport, RunMeta), RunError> {
    let started = std::time::Instant::now();
    let (solution, trace) = match algorithm {
        Algorithm::Proposed => alternate::alternate_optimize(sc)?,
        Algorithm::Baseline => alternate::baseline_straight_line(sc)?,
    };
    let robust_margin =
        oracles::sampled_robust_check(&solution.schedule, &solution.plan, sc, 10_000, seed);
    let slot_tx_power: Vec<f64> = (1..=sc.slots).map(|n| solution.schedule.transmit_sum(n)).collect();
    let user_rates = per_user_rates(sc, &solution.schedule, &solution.plan)?;
    let converged = trace.converged && trace.r_min_factor >= 1.0 && robust_margin >= 0.0;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        algorithm,
        seed,
        scenario: sc.clone(),
        trace,
        solution,
        slot_tx_power,
        user_rates,
        robust_margin,
        secrecy_guaranteed: alternate::secrecy_guarantee_check(sc).0,
        converged,
    };
    let meta = RunMeta { schema_version: SCHEMA_VERSION, wall_ms: started.elapsed().as_millis() };
    Ok((report, meta))
}

fn per_user_rates(
    sc: &Scenario,
    schedule: &Schedule,
    plan: &model::FlightPlan,
) -> Result<Vec<f64>, ModelError> {
    let mut rates = vec![0.0; sc.users];
    for n in 1..=sc.slots {
        for k in 0..sc.users {
            let h = model::channel_gain(plan.t[n], sc.user_pos[k], sc.altitude, sc.beta0)?;
            for i in 0..sc.subcarriers {
                let a = schedule.alpha_at(k, i, n);
                let p = schedule.power_at(k, i, n);
                rates[k] += model::link_rate(a, a * p, h, sc.bandwidth, sc.noise_psd)?;
            }
        }
    }
    rates.iter_mut().for_each(|r| *r /= sc.slots as f64);
    Ok(rates)
}

/// One sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eaves_radius_m: f64,
    pub p_peak_w: f64,
    pub algorithm: Algorithm,
    pub ee_bit_per_joule: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV with a header row; rows are ordered by the sweep indices
    /// regardless of which worker finished first.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema_version={}\n", self.schema_version);
        out.push_str("eaves_radius_m,p_peak_w,algorithm,ee_bit_per_joule,converged,error\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.eaves_radius_m,
                r.p_peak_w,
                r.algorithm,
                r.ee_bit_per_joule,
                r.converged,
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

/// Runs both algorithms over the (radius, peak power) grid. Cells fan out
/// over `workers` threads; per-cell failures are recorded and the sweep
/// continues.
pub fn sweep_radius(sc: &Scenario, radii: &[f64], p_peaks: &[f64], workers: usize, seed: u64) -> SweepTable {
    let mut cells = Vec::new();
    for &q in radii {
        for &p in p_peaks {
            for algo in [Algorithm::Proposed, Algorithm::Baseline] {
                cells.push((q, p, algo));
            }
        }
    }
    let workers = workers.max(1).min(cells.len().max(1));
    let results: Vec<SweepRow> = if workers <= 1 {
        cells.iter().map(|cell| sweep_cell(sc, *cell, seed)).collect()
    } else {
        let mut rows: Vec<Option<SweepRow>> = vec![None; cells.len()];
        std::thread::scope(|scope| {
            let chunks: Vec<(usize, &[(f64, f64, Algorithm)])> = cells
                .chunks(cells.len().div_ceil(workers))
                .enumerate()
                .map(|(i, c)| (i * cells.len().div_ceil(workers), c))
                .collect();
            let mut handles = Vec::new();
            for (offset, chunk) in chunks {
                let sc = sc.clone();
                handles.push((offset, scope.spawn(move || {
                    chunk.iter().map(|cell| sweep_cell(&sc, *cell, seed)).collect::<Vec<_>>()
                })));
            }
            for (offset, handle) in handles {
                for (i, row) in handle.join().expect("sweep worker panicked").into_iter().enumerate() {
                    rows[offset + i] = Some(row);
                }
            }
        });
        rows.into_iter().map(|r| r.expect("all cells computed")).collect()
    };
    SweepTable { schema_version: SCHEMA_VERSION, rows: results }
}

fn sweep_cell(sc: &Scenario, (q, p, algo): (f64, f64, Algorithm), seed: u64) -> SweepRow {
    let mut cell_sc = sc.clone();
    cell_sc.eaves_radius = q;
    cell_sc.p_peak = p;
    match run(&cell_sc, algo, seed) {
        Ok((report, _)) => SweepRow {
            eaves_radius_m: q,
            p_peak_w: p,
            algorithm: algo,
            ee_bit_per_joule: report.solution.ee,
            converged: report.converged,
            error: None,
        },
        Err(e) => SweepRow {
            eaves_radius_m: q,
            p_peak_w: p,
            algorithm: algo,
            ee_bit_per_joule: f64::NAN,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

/// Writes the trajectory CSV (one row per position, slot 0 is the start) and
/// a JSON sidecar with the plot-overlay geometry.
pub fn export_trajectory(report: &RunReport, out: &Path) -> Result<(), RunError> {
    let sc = &report.scenario;
    let plan = &report.solution.plan;
    if plan.t.len() != sc.slots + 1 {
        return Err(RunError::Malformed(format!(
            "trajectory has {} points, scenario wants {}",
            plan.t.len(),
            sc.slots + 1
        )));
    }
    let mut csv = format!("# schema_version={SCHEMA_VERSION}\n");
    csv.push_str("n,t_x,t_y,v_x,v_y,speed,slot_tx_power_w,min_leakage_margin\n");
    for n in 0..=sc.slots {
        let (v, speed, tx, margin) = if n == 0 {
            ([0.0, 0.0], 0.0, 0.0, sc.gamma_th)
        } else {
            let v = plan.v[n - 1];
            let tx = report.slot_tx_power[n - 1];
            let d_min = sched::min_eaves_dist_sq(plan.t[n], sc);
            let p_max_slot = (0..sc.subcarriers)
                .flat_map(|i| (0..sc.users).map(move |k| (i, k)))
                .map(|(i, k)| report.solution.schedule.alpha_at(k, i, n) * report.solution.schedule.power_at(k, i, n))
                .fold(0.0f64, f64::max);
            let snr = p_max_slot * sc.beta0 / (sc.bandwidth * sc.noise_psd * d_min);
            (v, norm(v), tx, sc.gamma_th - snr)
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            n, plan.t[n][0], plan.t[n][1], v[0], v[1], speed, tx, margin
        ));
    }
    write_file(out, csv.as_bytes())?;
    let sidecar = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "user_positions": sc.user_pos,
        "eaves_estimate": sc.eaves_est,
        "eaves_radius_m": sc.eaves_radius,
        "start": sc.start,
        "finish": sc.finish,
        "algorithm": report.algorithm.to_string(),
        "ee_bit_per_joule": report.solution.ee,
    });
    let side_path = out.with_extension("sidecar.json");
    write_file(&side_path, serde_json::to_string_pretty(&sidecar).expect("json").as_bytes())?;
    Ok(())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let io_err = |source| RunError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)
}

/// Checks the report's internal consistency: the stored energy efficiency
/// must match a recomputation from the stored schedule and trajectory.
pub fn verify_report(report: &RunReport) -> Result<(), RunError> {
    let ee = model::energy_efficiency(&report.solution.schedule, &report.solution.plan, &report.scenario)?;
    let denom = report.solution.ee.abs().max(1e-12);
    if ((ee - report.solution.ee) / denom).abs() > 1e-9 {
        return Err(RunError::Malformed(format!(
            "stored EE {} differs from recomputed {}",
            report.solution.ee, ee
        )));
    }
    Ok(())
}

/// Convenience accessor used by the audit-driven tests.
pub fn max_violation(residuals: &[Residual]) -> f64 {
    residuals.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max)
}
