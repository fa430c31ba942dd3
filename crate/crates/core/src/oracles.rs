//! Independent brute-force and sampling verifiers. These never share code
//! paths with the solvers they check: the schedule oracle enumerates the
//! objective directly, the robust check samples the uncertainty disc (plus
//! the analytic worst point), and the gradient checker uses central
//! differences.

use thiserror::Error;

use crate::convex::ball_project;
use crate::model::{self, dist_sq, FlightPlan, Scenario, Schedule};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration size {0} exceeds the oracle budget {1}")]
    BudgetExceeded(u128, u128),
}

/// Budgets for the exhaustive and sampling oracles.
#[derive(Debug, Clone)]
pub struct OracleBudget {
    /// Maximum number of candidate evaluations for brute force.
    pub max_enum: u128,
    /// Power grid levels per active (subcarrier, slot).
    pub grid: usize,
    /// Sample count for the robust check.
    pub samples: usize,
    pub seed: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self { max_enum: 200_000_000, grid: 25, samples: 10_000, seed: 0x5ECA_11CE }
    }
}

/// SplitMix64: tiny deterministic generator so oracle sampling is identical
/// on every platform and run.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn next_gauss(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform point in the disc of `radius` around `center`: Gaussian
    /// direction, radius proportional to sqrt(uniform).
    pub fn next_in_disc(&mut self, center: [f64; 2], radius: f64) -> [f64; 2] {
        let (mut dx, mut dy) = (self.next_gauss(), self.next_gauss());
        let n = (dx * dx + dy * dy).sqrt();
        if n < 1e-300 {
            dx = 1.0;
            dy = 0.0;
        } else {
            dx /= n;
            dy /= n;
        }
        let r = radius * self.next_f64().sqrt();
        [center[0] + r * dx, center[1] + r * dy]
    }
}

/// Exhaustive maximization of the energy efficiency over binary assignments
/// and gridded powers, subject to the exclusivity, peak/total power, minimum
/// rate and worst-case leakage constraints. Only viable on tiny instances.
pub fn brute_force_schedule(
    sc: &Scenario,
    plan: &FlightPlan,
    budget: &OracleBudget,
) -> Result<(f64, Schedule), OracleError> {
    let slots = sc.slots;
    let cells = sc.subcarriers * slots;
    let per_cell = (sc.users * budget.grid + 1) as u128;
    let total = per_cell.saturating_pow(cells as u32);
    if total > budget.max_enum {
        return Err(OracleError::BudgetExceeded(total, budget.max_enum));
    }

    // Precompute per-slot geometry from raw formulas.
    let alt_sq = sc.altitude * sc.altitude;
    let wn0 = sc.bandwidth * sc.noise_psd;
    let mut h_eff = vec![0.0; slots * sc.users];
    let mut cap = vec![0.0; slots];
    let mut fixed_power = vec![0.0; slots];
    for n in 1..=slots {
        for k in 0..sc.users {
            h_eff[(n - 1) * sc.users + k] =
                sc.beta0 / ((dist_sq(sc.user_pos[k], plan.t[n]) + alt_sq) * wn0);
        }
        let horiz = (model::norm(model::sub(plan.t[n], sc.eaves_est)) - sc.eaves_radius).max(0.0);
        let d_e_sq = horiz * horiz + alt_sq;
        cap[n - 1] = wn0 * sc.gamma_th * d_e_sq / sc.beta0;
        fixed_power[n - 1] =
            sc.p_circuit + model::flight_power(plan.v[n - 1], &sc.flight).unwrap_or(f64::INFINITY);
    }

    // Candidate per cell: silent, or (user, power level).
    struct Cell {
        n: usize,
        options: Vec<(Option<usize>, f64)>,
    }
    let mut cells_v = Vec::with_capacity(cells);
    for n in 1..=slots {
        for _i in 0..sc.subcarriers {
            let p_ub = cap[n - 1].min(sc.p_peak);
            let mut options = vec![(None, 0.0)];
            for k in 0..sc.users {
                for g in 0..budget.grid {
                    let p = p_ub * g as f64 / (budget.grid - 1) as f64;
                    options.push((Some(k), p));
                }
            }
            cells_v.push(Cell { n, options });
        }
    }

    let mut best_ee = 0.0f64;
    let mut best_choice: Vec<usize> = vec![0; cells];
    let mut choice = vec![0usize; cells];
    loop {
        // Evaluate this combination.
        let mut tx = vec![0.0; slots];
        let mut rates = vec![0.0; sc.users];
        let mut rate_sum = 0.0;
        for (c, cell) in cells_v.iter().enumerate() {
            let (user, p) = cell.options[choice[c]];
            if let Some(k) = user {
                tx[cell.n - 1] += p;
                let r = sc.bandwidth * (1.0 + p * h_eff[(cell.n - 1) * sc.users + k]).log2();
                rates[k] += r;
                rate_sum += r;
            }
        }
        let feasible = tx
            .iter()
            .enumerate()
            .all(|(n0, &t)| t <= sc.p_peak * (1.0 + 1e-12) && t + fixed_power[n0] <= sc.p_max * (1.0 + 1e-12))
            && rates.iter().all(|&r| r / slots as f64 >= sc.r_min * (1.0 - 1e-12));
        if feasible {
            let power: f64 = tx.iter().zip(&fixed_power).map(|(t, f)| t + f).sum();
            let ee = rate_sum / power;
            if ee > best_ee {
                best_ee = ee;
                best_choice.copy_from_slice(&choice);
            }
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == cells {
                let mut schedule = Schedule::zeros(sc.users, sc.subcarriers, slots);
                for (c, cell) in cells_v.iter().enumerate() {
                    let i = c % sc.subcarriers;
                    if let (Some(k), p) = cell.options[best_choice[c]] {
                        let j = schedule.idx(k, i, cell.n);
                        schedule.alpha[j] = 1.0;
                        schedule.power[j] = p;
                    }
                }
                return Ok((best_ee, schedule));
            }
            choice[pos] += 1;
            if choice[pos] < cells_v[pos].options.len() {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}

/// Worst-case leakage margin `Gamma_th - SNR` over the uncertainty disc,
/// taking the minimum over sampled eavesdropper positions plus the analytic
/// worst point (the disc point closest to the UAV), per scheduled entry.
/// Negative means the robust constraint is violated.
pub fn sampled_robust_check(
    schedule: &Schedule,
    plan: &FlightPlan,
    sc: &Scenario,
    samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = SplitMix64(seed);
    let alt_sq = sc.altitude * sc.altitude;
    let wn0 = sc.bandwidth * sc.noise_psd;
    let mut margin = sc.gamma_th;
    for n in 1..=sc.slots {
        let p_max_slot = (0..sc.subcarriers)
            .flat_map(|i| (0..sc.users).map(move |k| (i, k)))
            .map(|(i, k)| schedule.alpha_at(k, i, n) * schedule.power_at(k, i, n))
            .fold(0.0f64, f64::max);
        if p_max_slot == 0.0 {
            continue;
        }
        let mut d_min_sq = {
            let wp = ball_project(plan.t[n], sc.eaves_est, sc.eaves_radius);
            dist_sq(wp, plan.t[n]) + alt_sq
        };
        for _ in 0..samples {
            let pt = rng.next_in_disc(sc.eaves_est, sc.eaves_radius);
            d_min_sq = d_min_sq.min(dist_sq(pt, plan.t[n]) + alt_sq);
        }
        let snr = p_max_slot * sc.beta0 / (wn0 * d_min_sq);
        margin = margin.min(sc.gamma_th - snr);
    }
    margin
}

/// Maximum relative disagreement between an analytic gradient and central
/// finite differences over the given points.
pub fn finite_diff_check(
    value: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64], &mut [f64]),
    points: &[Vec<f64>],
    h: f64,
) -> f64 {
    assert!(h > 0.0);
    let mut worst = 0.0f64;
    for x in points {
        let dim = x.len();
        let mut g = vec![0.0; dim];
        gradient(x, &mut g);
        let scale = g.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-9);
        let mut xp = x.clone();
        for i in 0..dim {
            let step = h * (1.0 + x[i].abs());
            xp[i] = x[i] + step;
            let fp = value(&xp);
            xp[i] = x[i] - step;
            let fm = value(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * step);
            worst = worst.max((fd - g[i]).abs() / scale.max(fd.abs()));
        }
    }
    worst
}
