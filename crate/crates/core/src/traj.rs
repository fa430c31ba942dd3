//! Sub-problem 2: trajectory and velocity for a fixed schedule. An outer SCA
//! loop linearizes the non-convex pieces at the incumbent plan (rate lower
//! bound in the distance slacks, velocity-squared minorant, leakage scalar);
//! an inner Dinkelbach loop drives the ratio objective; each inner step is a
//! smooth convex program handed to the log-barrier solver.
//!
//! The robust leakage constraint is the S-procedure LMI reduced through its
//! Schur complement to a scalar convex inequality; because the top-left block
//! `(psi + 1) I_2` is positive definite for `psi >= 0`, the scalar form is
//! exactly equivalent. The full 3x3 matrix is still assembled for independent
//! PSD verification.
//!
//! Positions are eliminated: `t[n] = t0 + tau * sum_{m<=n} v[m]`, with the
//! endpoint condition handled as the affine equality `tau * sum v = tF - t0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{barrier_solve, BarrierSettings, SmoothProgram, SolveError, SymMat};
use crate::model::{
    dist_sq, norm, norm_sq, sub, FlightConsts, FlightPlan, ModelError, Point, Scenario,
    Schedule, UPSILON_MIN,
};

#[derive(Debug, Error)]
pub enum TrajError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("linearization point infeasible: {0}")]
    InfeasibleLinearization(String),
    #[error("no strictly feasible point found for the convex subproblem ({0})")]
    InfeasibleSubproblem(String),
    #[error("convex solver failed at main loop {main_iter}, inner loop {inner_iter}: {source}")]
    Solver {
        main_iter: usize,
        inner_iter: usize,
        #[source]
        source: SolveError,
    },
    #[error("non-positive slack distance u = {0}")]
    NonPositiveSlack(f64),
}

/// SCA bookkeeping: loop indices, the current ratio and the linearization
/// point the convex subproblem was built around.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScaState {
    pub j_main: usize,
    pub j_inner: usize,
    pub q2: f64,
    pub t_ref: Vec<Point>,
    pub v_ref: Vec<Point>,
    pub u_ref: Vec<f64>,
    /// q2 after each main-loop iteration.
    pub trace: Vec<f64>,
}

/// Outcome of the trajectory sub-problem.
#[derive(Debug, Clone)]
pub struct TrajSolve {
    pub plan: FlightPlan,
    pub q2: f64,
    pub state: ScaState,
    pub converged: bool,
    /// 1.0 normally; below 1.0 when the minimum-rate bound had to be relaxed
    /// to restore SCA feasibility (the run is flagged).
    pub r_min_factor: f64,
}

/// First-order lower bound of the rate in the distance slack `u`, touching
/// the true rate at `u_ref`.
pub fn rate_lower_bound(u: f64, u_ref: f64, gamma: f64, alpha: f64, w_hz: f64) -> Result<f64, TrajError> {
    if u <= 0.0 || u_ref <= 0.0 {
        return Err(TrajError::NonPositiveSlack(u.min(u_ref)));
    }
    let at_ref = w_hz * alpha * (1.0 + gamma / u_ref).log2();
    let slope = w_hz * alpha * gamma / (u_ref * (u_ref + gamma) * std::f64::consts::LN_2);
    Ok(at_ref - slope * (u - u_ref))
}

/// Affine minorant of ||v||^2 at `v_ref`.
pub fn velocity_lower_bound(v: Point, v_ref: Point) -> f64 {
    norm_sq(v_ref) + 2.0 * (v_ref[0] * (v[0] - v_ref[0]) + v_ref[1] * (v[1] - v_ref[1]))
}

/// Equivalent slot power with the slack speed in the induced term:
/// transmit + circuit + profile + P_i v0 / upsilon + parasite.
pub fn equivalent_power(
    schedule: &Schedule,
    n: usize,
    v: Point,
    upsilon: f64,
    sc: &Scenario,
) -> Result<f64, TrajError> {
    if upsilon < UPSILON_MIN {
        return Err(TrajError::Model(ModelError::SlackSpeedFloor(upsilon)));
    }
    Ok(schedule.transmit_sum(n) + sc.p_circuit + flight_relaxed(v, upsilon, &sc.flight))
}

fn flight_relaxed(v: Point, upsilon: f64, c: &FlightConsts) -> f64 {
    let sp_sq = norm_sq(v);
    let tip = c.omega * c.rotor_radius;
    c.blade_power * (1.0 + 3.0 * sp_sq / (tip * tip))
        + c.induced_power * c.induced_speed / upsilon
        + 0.5 * c.drag_ratio * c.air_density * c.solidity * c.disc_area * sp_sq.powf(1.5)
}

/// S-procedure certificate matrix
/// `[[ (psi+1) I2, t - t_hat ], [ (t - t_hat)^T, -psi Q^2 + c ]]`.
pub fn sproc_matrix(t_n: Point, psi_n: f64, c_val: f64, sc: &Scenario) -> [[f64; 3]; 3] {
    let d = sub(t_n, sc.eaves_est);
    [
        [psi_n + 1.0, 0.0, d[0]],
        [0.0, psi_n + 1.0, d[1]],
        [d[0], d[1], -psi_n * sc.eaves_radius * sc.eaves_radius + c_val],
    ]
}

/// Linearized leakage scalar: affine-in-t global minorant of
/// `c(t) = ||t - t_hat||^2 + H^2 - gamma / Gamma_th`, touching at `t_ref`.
pub fn linearized_c(t_n: Point, t_ref: Point, gamma: f64, sc: &Scenario) -> f64 {
    let lin_norm_sq = 2.0 * (t_n[0] * t_ref[0] + t_n[1] * t_ref[1]) - norm_sq(t_ref);
    let cross = 2.0 * (sc.eaves_est[0] * t_n[0] + sc.eaves_est[1] * t_n[1]);
    let leak = if gamma == 0.0 { 0.0 } else { gamma / sc.gamma_th };
    norm_sq(sc.eaves_est) + lin_norm_sq - cross + sc.altitude * sc.altitude - leak
}

/// The per-iteration convex program in the variables
/// `x = [v_1..v_N (2N), u_{k,n} (KN), upsilon_n (N), psi_n (N)]`.
#[derive(Clone)]
pub struct ConvexSubproblem {
    users: usize,
    slots: usize,
    tau: f64,
    start: Point,
    eaves_est: Point,
    q_e: f64,
    altitude: f64,
    p_max: f64,
    p_circuit: f64,
    v_max: f64,
    v_acc: f64,
    flight: FlightConsts,
    user_positions: Vec<Point>,
    /// Collapsed rate coefficients per (slot, user): sum_i of the lower-bound
    /// value at u_ref and of the (positive) slope in u.
    a_coef: Vec<f64>,
    b_coef: Vec<f64>,
    u_ref: Vec<f64>,
    /// Objective-only regularization slopes for the distance slacks.
    u_reg: Vec<f64>,
    /// Fixed transmit sum per slot.
    tx_sum: Vec<f64>,
    /// Worst-case gamma / Gamma_th per slot, m^2.
    leak_need: Vec<f64>,
    t_ref: Vec<Point>,
    v_ref: Vec<Point>,
    /// Per-user effective minimum-rate floors; rows are omitted when all zero.
    r_min_eff: Vec<f64>,
    pub q2: f64,
    eq_rows: Vec<Vec<f64>>,
    eq_rhs: Vec<f64>,
}

// Row families, in order.
const FAM_C13: usize = 0; // K*N rows
const FAM_BUDGET: usize = 1; // N rows
const FAM_RATE: usize = 2; // K rows (only when r_min_eff > 0)
const FAM_SCHUR: usize = 3; // N rows
const FAM_VMAX: usize = 4; // N rows
const FAM_ACC: usize = 5; // N-1 rows
const FAM_C15: usize = 6; // N rows
const FAM_C16: usize = 7; // N rows
const FAM_PSI: usize = 8; // N rows

impl ConvexSubproblem {
    #[inline]
    fn off_u(&self) -> usize {
        2 * self.slots
    }
    #[inline]
    fn off_ups(&self) -> usize {
        2 * self.slots + self.users * self.slots
    }
    #[inline]
    fn off_psi(&self) -> usize {
        self.off_ups() + self.slots
    }
    #[inline]
    fn u_index(&self, k: usize, n: usize) -> usize {
        self.off_u() + (n - 1) * self.users + k
    }

    fn rate_rows(&self) -> usize {
        if self.r_min_eff.iter().any(|&r| r > 0.0) {
            self.users
        } else {
            0
        }
    }

    /// (family, local index) for a flat row id.
    fn family(&self, j: usize) -> (usize, usize) {
        let n = self.slots;
        let mut j = j;
        for (fam, len) in [
            (FAM_C13, self.users * n),
            (FAM_BUDGET, n),
            (FAM_RATE, self.rate_rows()),
            (FAM_SCHUR, n),
            (FAM_VMAX, n),
            (FAM_ACC, n - 1),
            (FAM_C15, n),
            (FAM_C16, n),
            (FAM_PSI, n),
        ] {
            if j < len {
                return (fam, j);
            }
            j -= len;
        }
        unreachable!("row id out of range")
    }

    /// Position of slot `n` implied by the velocities in `x`.
    fn t_at(&self, x: &[f64], n: usize) -> Point {
        let mut t = self.start;
        for m in 0..n {
            t[0] += self.tau * x[2 * m];
            t[1] += self.tau * x[2 * m + 1];
        }
        t
    }

    /// Average rate lower bound at `x`, bit/s.
    pub fn rate_bound_avg(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for n in 1..=self.slots {
            for k in 0..self.users {
                let j = (n - 1) * self.users + k;
                total += self.a_coef[j] - self.b_coef[j] * (x[self.u_index(k, n)] - self.u_ref[j]);
            }
        }
        total / self.slots as f64
    }

    /// Average equivalent power at `x`, W.
    pub fn power_eq_avg(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for n in 1..=self.slots {
            let v = [x[2 * (n - 1)], x[2 * n - 1]];
            let ups = x[self.off_ups() + n - 1];
            total += self.tx_sum[n - 1] + self.p_circuit + flight_relaxed(v, ups, &self.flight);
        }
        total / self.slots as f64
    }

    /// Schur-reduced leakage scalar for slot `n` at `x`, in `g <= 0` form.
    fn schur_value(&self, x: &[f64], n: usize) -> f64 {
        let t = self.t_at(x, n);
        let psi = x[self.off_psi() + n - 1];
        let d = sub(t, self.eaves_est);
        psi * self.q_e * self.q_e - self.c_tilde(t, n) + norm_sq(d) / (psi + 1.0)
    }

    fn c_tilde(&self, t: Point, n: usize) -> f64 {
        let tr = self.t_ref[n - 1];
        let lin_norm_sq = 2.0 * (t[0] * tr[0] + t[1] * tr[1]) - norm_sq(tr);
        let cross = 2.0 * (self.eaves_est[0] * t[0] + self.eaves_est[1] * t[1]);
        norm_sq(self.eaves_est) + lin_norm_sq - cross + self.altitude * self.altitude
            - self.leak_need[n - 1]
    }
}

impl SmoothProgram for ConvexSubproblem {
    fn dim(&self) -> usize {
        2 * self.slots + self.users * self.slots + 2 * self.slots
    }

    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let nf = self.slots as f64;
        let mut reg = 0.0;
        for n in 1..=self.slots {
            for k in 0..self.users {
                let j = (n - 1) * self.users + k;
                reg += self.u_reg[j] * (x[self.u_index(k, n)] - self.u_ref[j]);
            }
        }
        let value = -self.rate_bound_avg(x) + self.q2 * self.power_eq_avg(x) + reg / nf;
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            for n in 1..=self.slots {
                for k in 0..self.users {
                    let j = (n - 1) * self.users + k;
                    g[self.u_index(k, n)] = (self.b_coef[j] + self.u_reg[j]) / nf;
                }
                let vx = x[2 * (n - 1)];
                let vy = x[2 * n - 1];
                let speed = (vx * vx + vy * vy).sqrt();
                let tip = self.flight.omega * self.flight.rotor_radius;
                let cd = 0.5
                    * self.flight.drag_ratio
                    * self.flight.air_density
                    * self.flight.solidity
                    * self.flight.disc_area;
                let coef = self.q2 / nf * (6.0 * self.flight.blade_power / (tip * tip) + 3.0 * cd * speed);
                g[2 * (n - 1)] = coef * vx;
                g[2 * n - 1] = coef * vy;
                let ups = x[self.off_ups() + n - 1];
                g[self.off_ups() + n - 1] =
                    -self.q2 / nf * self.flight.induced_power * self.flight.induced_speed / (ups * ups);
            }
        }
        value
    }

    fn objective_hessian_add(&self, x: &[f64], h: &mut SymMat) {
        if self.q2 == 0.0 {
            return;
        }
        let nf = self.slots as f64;
        let tip = self.flight.omega * self.flight.rotor_radius;
        let cd = 0.5
            * self.flight.drag_ratio
            * self.flight.air_density
            * self.flight.solidity
            * self.flight.disc_area;
        for n in 1..=self.slots {
            let w = self.q2 / nf;
            add_speed_curvature(h, 2 * (n - 1), [x[2 * (n - 1)], x[2 * n - 1]], w, tip, cd, &self.flight);
            let ups = x[self.off_ups() + n - 1];
            h.add(
                self.off_ups() + n - 1,
                self.off_ups() + n - 1,
                w * 2.0 * self.flight.induced_power * self.flight.induced_speed / (ups * ups * ups),
            );
        }
    }

    fn num_inequalities(&self) -> usize {
        let n = self.slots;
        self.users * n + n + self.rate_rows() + n + n + (n - 1) + n + n + n
    }

    fn inequality(&self, j: usize, x: &[f64]) -> f64 {
        let (fam, l) = self.family(j);
        match fam {
            FAM_C13 => {
                let n = l / self.users + 1;
                let k = l % self.users;
                let t = self.t_at(x, n);
                dist_sq(self.user_positions[k], t) + self.altitude * self.altitude
                    - x[self.u_index(k, n)]
            }
            FAM_BUDGET => {
                let n = l + 1;
                let v = [x[2 * (n - 1)], x[2 * n - 1]];
                let ups = x[self.off_ups() + n - 1];
                self.tx_sum[n - 1] + self.p_circuit + flight_relaxed(v, ups, &self.flight) - self.p_max
            }
            FAM_RATE => {
                let k = l;
                let mut rate = 0.0;
                for n in 1..=self.slots {
                    let jj = (n - 1) * self.users + k;
                    rate += self.a_coef[jj] - self.b_coef[jj] * (x[self.u_index(k, n)] - self.u_ref[jj]);
                }
                self.r_min_eff[k] - rate / self.slots as f64
            }
            FAM_SCHUR => self.schur_value(x, l + 1),
            FAM_VMAX => {
                let n = l + 1;
                let v = [x[2 * (n - 1)], x[2 * n - 1]];
                norm_sq(v) - self.v_max * self.v_max
            }
            FAM_ACC => {
                let n = l + 1; // couples v[n] and v[n+1]
                let dvx = x[2 * n] - x[2 * (n - 1)];
                let dvy = x[2 * n + 1] - x[2 * n - 1];
                dvx * dvx + dvy * dvy - self.v_acc * self.v_acc
            }
            FAM_C15 => {
                let n = l + 1;
                let v = [x[2 * (n - 1)], x[2 * n - 1]];
                let ups = x[self.off_ups() + n - 1];
                ups * ups - velocity_lower_bound(v, self.v_ref[n - 1])
            }
            FAM_C16 => UPSILON_MIN - x[self.off_ups() + l],
            FAM_PSI => -x[self.off_psi() + l],
            _ => unreachable!(),
        }
    }

    fn inequality_grad(&self, j: usize, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let (fam, l) = self.family(j);
        match fam {
            FAM_C13 => {
                let n = l / self.users + 1;
                let k = l % self.users;
                let t = self.t_at(x, n);
                let d = sub(t, self.user_positions[k]);
                for m in 0..n {
                    grad[2 * m] = 2.0 * self.tau * d[0];
                    grad[2 * m + 1] = 2.0 * self.tau * d[1];
                }
                grad[self.u_index(k, n)] = -1.0;
            }
            FAM_BUDGET => {
                let n = l + 1;
                let vx = x[2 * (n - 1)];
                let vy = x[2 * n - 1];
                let speed = (vx * vx + vy * vy).sqrt();
                let tip = self.flight.omega * self.flight.rotor_radius;
                let cd = 0.5
                    * self.flight.drag_ratio
                    * self.flight.air_density
                    * self.flight.solidity
                    * self.flight.disc_area;
                let coef = 6.0 * self.flight.blade_power / (tip * tip) + 3.0 * cd * speed;
                grad[2 * (n - 1)] = coef * vx;
                grad[2 * n - 1] = coef * vy;
                let ups = x[self.off_ups() + n - 1];
                grad[self.off_ups() + n - 1] =
                    -self.flight.induced_power * self.flight.induced_speed / (ups * ups);
            }
            FAM_RATE => {
                let k = l;
                for n in 1..=self.slots {
                    grad[self.u_index(k, n)] = self.b_coef[(n - 1) * self.users + k] / self.slots as f64;
                }
            }
            FAM_SCHUR => {
                let n = l + 1;
                let t = self.t_at(x, n);
                let psi = x[self.off_psi() + n - 1];
                let d = sub(t, self.eaves_est);
                let tr = self.t_ref[n - 1];
                // d/dt of (-c_tilde + ||d||^2 / (psi + 1)).
                let gt = [
                    -2.0 * (tr[0] - self.eaves_est[0]) + 2.0 * d[0] / (psi + 1.0),
                    -2.0 * (tr[1] - self.eaves_est[1]) + 2.0 * d[1] / (psi + 1.0),
                ];
                for m in 0..n {
                    grad[2 * m] = self.tau * gt[0];
                    grad[2 * m + 1] = self.tau * gt[1];
                }
                grad[self.off_psi() + n - 1] =
                    self.q_e * self.q_e - norm_sq(d) / ((psi + 1.0) * (psi + 1.0));
            }
            FAM_VMAX => {
                let n = l + 1;
                grad[2 * (n - 1)] = 2.0 * x[2 * (n - 1)];
                grad[2 * n - 1] = 2.0 * x[2 * n - 1];
            }
            FAM_ACC => {
                let n = l + 1;
                let dvx = x[2 * n] - x[2 * (n - 1)];
                let dvy = x[2 * n + 1] - x[2 * n - 1];
                grad[2 * (n - 1)] = -2.0 * dvx;
                grad[2 * n - 1] = -2.0 * dvy;
                grad[2 * n] = 2.0 * dvx;
                grad[2 * n + 1] = 2.0 * dvy;
            }
            FAM_C15 => {
                let n = l + 1;
                grad[self.off_ups() + n - 1] = 2.0 * x[self.off_ups() + n - 1];
                grad[2 * (n - 1)] = -2.0 * self.v_ref[n - 1][0];
                grad[2 * n - 1] = -2.0 * self.v_ref[n - 1][1];
            }
            FAM_C16 => grad[self.off_ups() + l] = -1.0,
            FAM_PSI => grad[self.off_psi() + l] = -1.0,
            _ => unreachable!(),
        }
    }

    fn inequality_hess_add(&self, j: usize, x: &[f64], w: f64, h: &mut SymMat) {
        let (fam, l) = self.family(j);
        match fam {
            FAM_C13 => {
                let n = l / self.users + 1;
                let c = 2.0 * self.tau * self.tau * w;
                for m1 in 0..n {
                    for m2 in 0..n {
                        h.data[(2 * m1) * h.n + 2 * m2] += c;
                        h.data[(2 * m1 + 1) * h.n + 2 * m2 + 1] += c;
                    }
                }
            }
            FAM_BUDGET => {
                let n = l + 1;
                let tip = self.flight.omega * self.flight.rotor_radius;
                let cd = 0.5
                    * self.flight.drag_ratio
                    * self.flight.air_density
                    * self.flight.solidity
                    * self.flight.disc_area;
                add_speed_curvature(h, 2 * (n - 1), [x[2 * (n - 1)], x[2 * n - 1]], w, tip, cd, &self.flight);
                let ups = x[self.off_ups() + n - 1];
                h.add(
                    self.off_ups() + n - 1,
                    self.off_ups() + n - 1,
                    w * 2.0 * self.flight.induced_power * self.flight.induced_speed / (ups * ups * ups),
                );
            }
            FAM_RATE => {}
            FAM_SCHUR => {
                let n = l + 1;
                let t = self.t_at(x, n);
                let psi = x[self.off_psi() + n - 1];
                let d = sub(t, self.eaves_est);
                let p1 = psi + 1.0;
                // t-t block: 2/(psi+1) I2 through the prefix map.
                let c = w * 2.0 * self.tau * self.tau / p1;
                for m1 in 0..n {
                    for m2 in 0..n {
                        h.data[(2 * m1) * h.n + 2 * m2] += c;
                        h.data[(2 * m1 + 1) * h.n + 2 * m2 + 1] += c;
                    }
                }
                // t-psi cross: -2 d / (psi+1)^2.
                let psi_ix = self.off_psi() + n - 1;
                let gx = w * self.tau * (-2.0) * d[0] / (p1 * p1);
                let gy = w * self.tau * (-2.0) * d[1] / (p1 * p1);
                for m in 0..n {
                    h.add(2 * m, psi_ix, gx);
                    h.add(2 * m + 1, psi_ix, gy);
                }
                h.add(psi_ix, psi_ix, w * 2.0 * norm_sq(d) / (p1 * p1 * p1));
            }
            FAM_VMAX => {
                let n = l + 1;
                h.add(2 * (n - 1), 2 * (n - 1), 2.0 * w);
                h.add(2 * n - 1, 2 * n - 1, 2.0 * w);
            }
            FAM_ACC => {
                let n = l + 1;
                for d in 0..2 {
                    let i1 = 2 * (n - 1) + d;
                    let i2 = 2 * n + d;
                    h.add(i1, i1, 2.0 * w);
                    h.add(i2, i2, 2.0 * w);
                    h.add(i1, i2, -2.0 * w);
                }
            }
            FAM_C15 => {
                let n = l + 1;
                h.add(self.off_ups() + n - 1, self.off_ups() + n - 1, 2.0 * w);
            }
            FAM_C16 | FAM_PSI => {}
            _ => unreachable!(),
        }
    }

    fn equalities(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.eq_rows, &self.eq_rhs)
    }
}

fn add_speed_curvature(
    h: &mut SymMat,
    vx_ix: usize,
    v: Point,
    w: f64,
    tip: f64,
    cd: f64,
    flight: &FlightConsts,
) {
    let speed = norm(v);
    let base = w * 6.0 * flight.blade_power / (tip * tip);
    h.add(vx_ix, vx_ix, base);
    h.add(vx_ix + 1, vx_ix + 1, base);
    if speed > 1e-12 {
        let c1 = w * 3.0 * cd;
        h.add(vx_ix, vx_ix, c1 * (speed + v[0] * v[0] / speed));
        h.add(vx_ix + 1, vx_ix + 1, c1 * (speed + v[1] * v[1] / speed));
        h.add(vx_ix, vx_ix + 1, c1 * v[0] * v[1] / speed);
    }
}

/// Assembles the convex subproblem for a given schedule, linearization point
/// and Dinkelbach ratio. The linearization point must satisfy C8-C14 and C16.
pub fn build_subproblem(
    sc: &Scenario,
    schedule: &Schedule,
    state: &ScaState,
    r_min: f64,
) -> Result<ConvexSubproblem, TrajError> {
    let n_slots = sc.slots;
    let wn0 = sc.bandwidth * sc.noise_psd;
    let mut a_coef = vec![0.0; sc.users * n_slots];
    let mut b_coef = vec![0.0; sc.users * n_slots];
    let mut leak_need = vec![0.0; n_slots];
    let mut tx_sum = vec![0.0; n_slots];
    for n in 1..=n_slots {
        let mut gmax = 0.0f64;
        for i in 0..sc.subcarriers {
            for k in 0..sc.users {
                let alpha = schedule.alpha_at(k, i, n);
                if alpha <= 0.0 {
                    continue;
                }
                let p = schedule.power_at(k, i, n);
                let gamma = p * sc.beta0 / wn0;
                gmax = gmax.max(gamma * alpha);
                tx_sum[n - 1] += alpha * p;
                let j = (n - 1) * sc.users + k;
                let u_ref = state.u_ref[j];
                if u_ref <= 0.0 {
                    return Err(TrajError::NonPositiveSlack(u_ref));
                }
                a_coef[j] += sc.bandwidth * alpha * (1.0 + gamma / u_ref).log2();
                b_coef[j] +=
                    sc.bandwidth * alpha * gamma / (u_ref * (u_ref + gamma) * std::f64::consts::LN_2);
            }
        }
        leak_need[n - 1] = if gmax == 0.0 { 0.0 } else { gmax / sc.gamma_th };
    }
    // Distance slacks of silent (user, slot) pairs would otherwise be
    // unbounded barrier descent directions, and weakly pulled ones drift far
    // enough to dominate the Newton work. A pure objective regularizer (kept
    // out of the rate bound and the rate rows so the minorant stays exact)
    // pins their central excursions near 1% of the u scale. Pairs whose own
    // rate slope already exceeds it are left untouched.
    let u_reg: Vec<f64> = b_coef
        .iter()
        .zip(&state.u_ref)
        .map(|(b, u)| {
            let pin = 100.0 / u.max(1.0);
            if *b < pin {
                pin
            } else {
                0.0
            }
        })
        .collect();
    // A rate floor above what the fixed schedule delivers at the reference
    // would be structurally infeasible. Users the schedule serves at or above
    // the floor keep the full requirement; an under-served user (already
    // flagged by the scheduling solver) gets a floor just below its reference
    // rate so the trajectory cannot erode it further.
    let r_min_eff: Vec<f64> = (0..sc.users)
        .map(|k| {
            if r_min <= 0.0 {
                return 0.0;
            }
            let ref_rate: f64 =
                (1..=n_slots).map(|n| a_coef[(n - 1) * sc.users + k]).sum::<f64>() / n_slots as f64;
            if ref_rate >= r_min {
                r_min
            } else {
                (ref_rate * (1.0 - 1e-3)).max(0.0)
            }
        })
        .collect();
    // Endpoint equality: tau * sum_n v[n] = finish - start.
    let dim = 2 * n_slots + sc.users * n_slots + 2 * n_slots;
    let mut row_x = vec![0.0; dim];
    let mut row_y = vec![0.0; dim];
    for n in 0..n_slots {
        row_x[2 * n] = sc.slot_secs;
        row_y[2 * n + 1] = sc.slot_secs;
    }
    Ok(ConvexSubproblem {
        users: sc.users,
        slots: n_slots,
        tau: sc.slot_secs,
        start: sc.start,
        eaves_est: sc.eaves_est,
        q_e: sc.eaves_radius,
        altitude: sc.altitude,
        p_max: sc.p_max,
        p_circuit: sc.p_circuit,
        v_max: sc.v_max,
        v_acc: sc.v_acc,
        flight: sc.flight.clone(),
        user_positions: sc.user_pos.clone(),
        a_coef,
        b_coef,
        u_ref: state.u_ref.clone(),
        u_reg,
        tx_sum,
        leak_need,
        t_ref: state.t_ref.clone(),
        v_ref: state.v_ref.clone(),
        r_min_eff,
        q2: state.q2,
        eq_rows: vec![row_x, row_y],
        eq_rhs: vec![sc.finish[0] - sc.start[0], sc.finish[1] - sc.start[1]],
    })
}

/// Checks that a plan is usable as an SCA linearization point (C8-C14, C16).
pub fn validate_linearization(sc: &Scenario, plan: &FlightPlan) -> Result<(), TrajError> {
    let bad = |msg: String| Err(TrajError::InfeasibleLinearization(msg));
    let n = sc.slots;
    if plan.v.len() != n || plan.t.len() != n + 1 {
        return bad(format!("plan has {} slots, scenario {}", plan.v.len(), n));
    }
    if plan.t[0] != sc.start {
        return bad("C8: plan does not start at t0".into());
    }
    let endpoint = norm(sub(plan.t[n], sc.finish));
    if endpoint > 1e-6 {
        return bad(format!("C9: endpoint misses tF by {endpoint} m"));
    }
    for i in 1..=n {
        let pred = [
            plan.t[i - 1][0] + plan.v[i - 1][0] * sc.slot_secs,
            plan.t[i - 1][1] + plan.v[i - 1][1] * sc.slot_secs,
        ];
        if norm(sub(pred, plan.t[i])) > 1e-6 {
            return bad(format!("C10: kinematic mismatch at slot {i}"));
        }
        let speed = norm(plan.v[i - 1]);
        if speed > sc.v_max * (1.0 + 1e-9) {
            return bad(format!("C11: speed {speed} exceeds {}", sc.v_max));
        }
        for k in 0..sc.users {
            let need = dist_sq(sc.user_pos[k], plan.t[i]) + sc.altitude * sc.altitude;
            if plan.u_at(k, i, sc.users) < need * (1.0 - 1e-9) {
                return bad(format!("C13: slack below squared distance at user {k}, slot {i}"));
            }
        }
        if plan.psi[i - 1] < 0.0 {
            return bad("C14: negative S-procedure certificate".into());
        }
        if plan.upsilon[i - 1] < 0.0 {
            return bad("C16: negative slack speed".into());
        }
    }
    for i in 1..n {
        let dv = norm(sub(plan.v[i], plan.v[i - 1]));
        if dv > sc.v_acc * (1.0 + 1e-9) {
            return bad(format!("C12: speed change {dv} exceeds {}", sc.v_acc));
        }
    }
    Ok(())
}

/// Packs a plan into the decision vector, exactly on the reference manifold.
fn pack_reference(prob: &ConvexSubproblem, plan: &FlightPlan) -> Vec<f64> {
    let mut x = vec![0.0; prob.dim()];
    for n in 0..prob.slots {
        x[2 * n] = plan.v[n][0];
        x[2 * n + 1] = plan.v[n][1];
    }
    for n in 1..=prob.slots {
        for k in 0..prob.users {
            x[prob.u_index(k, n)] = plan.u_at(k, n, prob.users);
        }
        x[prob.off_ups() + n - 1] = plan.upsilon[n - 1];
        x[prob.off_psi() + n - 1] = plan.psi[n - 1];
    }
    x
}

/// Re-derives the slack variables (u, upsilon, psi) from the velocity part
/// of `x`: distance slacks inflated off C13, slack speeds backed off the C15
/// boundary, certificates at the closed-form heuristic with a margin-aware
/// offset into psi > 0.
fn fill_slacks(prob: &ConvexSubproblem, sc: &Scenario, x: &mut [f64]) {
    for slot in 1..=prob.slots {
        let t = prob.t_at(x, slot);
        for k in 0..prob.users {
            let need = dist_sq(sc.user_pos[k], t) + sc.altitude * sc.altitude;
            x[prob.u_index(k, slot)] = need * 1.01;
        }
        let v = [x[2 * (slot - 1)], x[2 * slot - 1]];
        let lin = velocity_lower_bound(v, prob.v_ref[slot - 1]).max(0.0);
        let ups = (lin.sqrt() * (1.0 - 1e-6)).max(UPSILON_MIN * (1.0 + 1e-9));
        x[prob.off_ups() + slot - 1] = ups;
        let dist = norm(sub(t, sc.eaves_est));
        let psi_h = if sc.eaves_radius > 0.0 { (dist / sc.eaves_radius - 1.0).max(0.0) } else { 0.0 };
        let slack = {
            let d = sub(t, sc.eaves_est);
            -(psi_h * sc.eaves_radius * sc.eaves_radius) + prob.c_tilde(t, slot)
                - norm_sq(d) / (psi_h + 1.0)
        };
        let loss_rate =
            (sc.eaves_radius * sc.eaves_radius - dist * dist / ((psi_h + 1.0) * (psi_h + 1.0))).abs();
        let delta = if psi_h > 0.0 {
            1e-3
        } else {
            (0.25 * slack.max(0.0) / loss_rate.max(1.0)).min(1e-3).max(1e-12)
        };
        x[prob.off_psi() + slot - 1] = psi_h + delta;
    }
}

/// Nudges the reference into the strict interior: velocities pulled slightly
/// towards the constant straight-line velocity (strictly interior for
/// C11/C12, preserves the endpoint equality), slacks re-derived. The blend
/// weight backs off when the nudge itself breaks a boundary-riding row
/// (lambda = 0 keeps the incumbent velocities, already interior whenever the
/// plan came out of a barrier solve).
fn strict_start(prob: &ConvexSubproblem, sc: &Scenario, plan: &FlightPlan) -> Vec<f64> {
    let base = pack_reference(prob, plan);
    let n = prob.slots;
    let v_bar = [
        (sc.finish[0] - sc.start[0]) / (n as f64 * sc.slot_secs),
        (sc.finish[1] - sc.start[1]) / (n as f64 * sc.slot_secs),
    ];
    let mut fallback = None;
    for lambda in [1e-3, 1e-4, 1e-5, 1e-6, 0.0] {
        let mut x = base.clone();
        for m in 0..n {
            x[2 * m] = (1.0 - lambda) * x[2 * m] + lambda * v_bar[0];
            x[2 * m + 1] = (1.0 - lambda) * x[2 * m + 1] + lambda * v_bar[1];
        }
        fill_slacks(prob, sc, &mut x);
        if (0..prob.num_inequalities()).all(|j| prob.inequality(j, &x) < 0.0) {
            return x;
        }
        if fallback.is_none() {
            fallback = Some(x);
        }
    }
    fallback.expect("ladder produced at least one candidate")
}

/// Phase-I wrapper: minimize `s` subject to `g_j(x) <= s` for the relaxable
/// rows, same equalities. The slack-domain rows (upsilon floor, psi >= 0)
/// stay hard: relaxing them would leave the convexity domain of the induced
/// power and quadratic-over-linear terms.
struct PhaseOne<'a> {
    inner: &'a ConvexSubproblem,
    eq_rows_cache: Vec<Vec<f64>>,
}

impl ConvexSubproblem {
    fn relaxable(&self, j: usize) -> bool {
        !matches!(self.family(j).0, FAM_C16 | FAM_PSI)
    }

    /// Human-readable constraint family for diagnostics and tests.
    pub fn family_name(&self, j: usize) -> &'static str {
        match self.family(j).0 {
            FAM_C13 => "C13 distance slack",
            FAM_BUDGET => "C5 equivalent power cap",
            FAM_RATE => "C6 rate lower bound",
            FAM_SCHUR => "C7 robust leakage (Schur)",
            FAM_VMAX => "C11 speed limit",
            FAM_ACC => "C12 speed change",
            FAM_C15 => "C15 slack speed bound",
            FAM_C16 => "C16 slack speed floor",
            FAM_PSI => "C14 certificate sign",
            _ => unreachable!(),
        }
    }
}

/// Strictly feasible point for a built subproblem; used by verification
/// harnesses that probe the program at interior points.
pub fn interior_point(
    prob: &ConvexSubproblem,
    sc: &Scenario,
    plan: &FlightPlan,
) -> Result<Vec<f64>, TrajError> {
    find_interior(prob, sc, plan, None)
}

impl<'a> PhaseOne<'a> {
    fn new(inner: &'a ConvexSubproblem) -> Self {
        let eq_rows_cache = inner
            .eq_rows
            .iter()
            .map(|r| {
                let mut v = r.clone();
                v.push(0.0);
                v
            })
            .collect();
        Self { inner, eq_rows_cache }
    }
}

impl SmoothProgram for PhaseOne<'_> {
    fn dim(&self) -> usize {
        self.inner.dim() + 1
    }
    fn objective(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            *g.last_mut().unwrap() = 1.0;
        }
        x[self.dim() - 1]
    }
    fn objective_hessian_add(&self, _x: &[f64], _h: &mut SymMat) {}
    fn num_inequalities(&self) -> usize {
        self.inner.num_inequalities()
    }
    fn inequality(&self, j: usize, x: &[f64]) -> f64 {
        let relax = if self.inner.relaxable(j) { x[self.dim() - 1] } else { 0.0 };
        self.inner.inequality(j, &x[..self.inner.dim()]) - relax
    }
    fn inequality_grad(&self, j: usize, x: &[f64], grad: &mut [f64]) {
        let nd = self.inner.dim();
        self.inner.inequality_grad(j, &x[..nd], &mut grad[..nd]);
        grad[nd] = if self.inner.relaxable(j) { -1.0 } else { 0.0 };
    }
    fn inequality_hess_add(&self, j: usize, x: &[f64], w: f64, h: &mut SymMat) {
        // Curvature lives in the x block; copy through a sub-sized accumulator.
        let nd = self.inner.dim();
        let mut sub_h = SymMat::zeros(nd);
        self.inner.inequality_hess_add(j, &x[..nd], w, &mut sub_h);
        for i in 0..nd {
            for c in 0..nd {
                let v = sub_h.data[i * nd + c];
                if v != 0.0 {
                    h.data[i * h.n + c] += v;
                }
            }
        }
    }
    fn equalities(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.eq_rows_cache, &self.inner.eq_rhs)
    }
}

/// Returns a strictly feasible point. The previous solver iterate, when
/// provided, is strictly feasible for the relinearized subproblem (every SCA
/// minorant only loosens at a fresh reference) and is preferred; otherwise
/// the nudged reference is tried, then a phase-I solve with re-derived
/// slacks.
fn find_interior(
    prob: &ConvexSubproblem,
    sc: &Scenario,
    plan: &FlightPlan,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>, TrajError> {
    let is_strict =
        |x: &[f64]| (0..prob.num_inequalities()).all(|j| prob.inequality(j, x) < 0.0);
    if let Some(w) = warm {
        if is_strict(w) {
            return Ok(w.to_vec());
        }
    }
    let x0 = strict_start(prob, sc, plan);
    if is_strict(&x0) {
        return Ok(x0);
    }
    let phase = PhaseOne::new(prob);
    let mut x1 = x0.clone();
    let worst = (0..prob.num_inequalities())
        .map(|j| prob.inequality(j, &x0))
        .fold(f64::NEG_INFINITY, f64::max);
    x1.push(worst.max(0.0) * 1.1 + 1.0);
    // Stop as soon as a comfortably interior point is certified.
    let settings = BarrierSettings {
        gap_tol: 1e-6,
        stop_below: Some(-1e-3),
        ..BarrierSettings::default()
    };
    let solved = barrier_solve(&phase, &x1, &settings)
        .map_err(|e| TrajError::InfeasibleSubproblem(format!("phase-I failed: {e}")))?;
    let s = *solved.x.last().unwrap();
    if s >= 0.0 {
        return Err(TrajError::InfeasibleSubproblem(format!("phase-I optimum s = {s}")));
    }
    // Phase-I leaves the unpenalized slacks wherever Newton drifted them;
    // re-derive them from the velocity part when that stays interior.
    let mut x = solved.x[..prob.dim()].to_vec();
    let mut renorm = x.clone();
    fill_slacks(prob, sc, &mut renorm);
    if is_strict(&renorm) {
        x = renorm;
    }
    Ok(x)
}

/// Extracts a feasible plan from a solution vector: positions by exact
/// kinematic accumulation with the endpoint pinned, slack speeds at the
/// actual speeds (C15 active), distance slacks tight (C13 active).
fn extract_plan(prob: &ConvexSubproblem, sc: &Scenario, x: &[f64]) -> FlightPlan {
    let n = prob.slots;
    let mut vels: Vec<Point> = (0..n).map(|m| [x[2 * m], x[2 * m + 1]]).collect();
    // Pin the endpoint: the last velocity absorbs the equality-solve rounding.
    let mut t_last = sc.start;
    for v in vels.iter().take(n - 1) {
        t_last = [t_last[0] + v[0] * sc.slot_secs, t_last[1] + v[1] * sc.slot_secs];
    }
    vels[n - 1] = [
        (sc.finish[0] - t_last[0]) / sc.slot_secs,
        (sc.finish[1] - t_last[1]) / sc.slot_secs,
    ];
    let mut plan = FlightPlan::from_velocities(sc, &vels);
    plan.t[n] = sc.finish;
    for slot in 0..n {
        plan.psi[slot] = x[prob.off_psi() + slot];
    }
    plan
}

/// Algorithm for sub-problem 2: outer SCA relinearization around the incumbent
/// plan, inner Dinkelbach on the bound ratio, each step one barrier solve.
/// A best-iterate guard keeps the q2 trace non-decreasing; the returned plan
/// has upsilon = ||v|| and tight distance slacks. The ratio starts at zero.
pub fn sca_dinkelbach_trajectory(
    sc: &Scenario,
    schedule: &Schedule,
    init_plan: &FlightPlan,
) -> Result<TrajSolve, TrajError> {
    sca_dinkelbach_trajectory_from(sc, schedule, init_plan, 0.0)
}

/// Same solver with the Dinkelbach ratio warm-started. Any ratio attained by
/// a feasible point is valid (the incumbent plan's true energy efficiency in
/// the alternating loop); the updates remain monotone from there.
pub fn sca_dinkelbach_trajectory_from(
    sc: &Scenario,
    schedule: &Schedule,
    init_plan: &FlightPlan,
    q2_init: f64,
) -> Result<TrajSolve, TrajError> {
    validate_linearization(sc, init_plan)?;
    let mut plan = init_plan.clone();
    let mut q2 = q2_init.max(0.0);
    let mut state = ScaState::default();
    let mut converged = false;
    let mut r_min_factor = 1.0f64;
    let mut x_carry: Option<Vec<f64>> = None;

    for j_main in 0..sc.iter.j_max {
        state.j_main = j_main;
        state.t_ref = plan.t[1..].to_vec();
        state.v_ref = plan.v.clone();
        state.u_ref = (1..=sc.slots)
            .flat_map(|n| {
                let t = plan.t[n];
                (0..sc.users).map(move |k| (t, k))
            })
            .map(|(t, k)| dist_sq(sc.user_pos[k], t) + sc.altitude * sc.altitude)
            .collect();
        state.q2 = q2;

        // Build, retrying with a relaxed minimum rate when the lower bound
        // makes the rate rows infeasible at the first linearization.
        let interior_started = std::time::Instant::now();
        let mut built = None;
        for retry in 0..4 {
            let factor = r_min_factor * 0.99f64.powi(retry);
            let candidate = build_subproblem(sc, schedule, &state, sc.r_min * factor)?;
            match find_interior(&candidate, sc, &plan, x_carry.as_deref()) {
                Ok(x) => {
                    if retry > 0 {
                        r_min_factor = factor;
                    }
                    built = Some((candidate, x));
                    break;
                }
                Err(e) => {
                    if j_main > 0 || retry == 3 {
                        return Err(e);
                    }
                }
            }
        }
        let (mut prob, mut x_warm) = built.expect("retry ladder returned");
        if std::env::var_os("SECUAV_TRACE").is_some() {
            eprintln!("traj interior j={j_main}: {} ms", interior_started.elapsed().as_millis());
        }

        // Inner Dinkelbach over the bound ratio. The exact reference point
        // serves the evaluation guards: its bound values equal the true rate
        // and power of the incumbent plan.
        let mut x_inc = pack_reference(&prob, &plan);
        let mut q_in = q2;
        for j_inner in 0..sc.iter.j_inner_max {
            state.j_inner = j_inner;
            prob.q2 = q_in;
            // Re-center the slack variables: the previous solution hugs its
            // boundaries after the final barrier stage, which is a poor start
            // once the Dinkelbach ratio moves. Keep the velocities.
            let mut recentered = x_warm.clone();
            fill_slacks(&prob, sc, &mut recentered);
            if (0..prob.num_inequalities()).all(|j| prob.inequality(j, &recentered) < 0.0) {
                x_warm = recentered;
            }
            // The parametric objective crosses zero at the Dinkelbach fix
            // point, so the gap target is anchored to its natural magnitude.
            let scale = prob.rate_bound_avg(&x_warm).abs()
                + prob.q2.max(1e-3) * prob.power_eq_avg(&x_warm).abs();
            let settings = BarrierSettings { gap_scale: scale.max(1.0), ..BarrierSettings::default() };
            let solve_started = std::time::Instant::now();
            let solved = barrier_solve(&prob, &x_warm, &settings).map_err(|source| TrajError::Solver {
                main_iter: j_main,
                inner_iter: j_inner,
                source,
            })?;
            if std::env::var_os("SECUAV_TRACE").is_some() {
                eprintln!(
                    "traj solve j={j_main}/{j_inner}: {} newton, {} stages, {} ms, q_in={q_in:.6}",
                    solved.newton_steps,
                    solved.stages,
                    solve_started.elapsed().as_millis()
                );
            }
            let f_new = prob.rate_bound_avg(&solved.x) - q_in * prob.power_eq_avg(&solved.x);
            let f_inc = prob.rate_bound_avg(&x_inc) - q_in * prob.power_eq_avg(&x_inc);
            x_carry = Some(solved.x.clone());
            if f_new >= f_inc {
                x_inc = solved.x.clone();
                x_warm = solved.x;
            }
            let rate = prob.rate_bound_avg(&x_inc);
            let power = prob.power_eq_avg(&x_inc);
            let f_best = rate - q_in * power;
            let q_next = if power > 0.0 { rate / power } else { 0.0 };
            if f_best <= 0.1 * sc.iter.eps_tol * (q_in * power).max(1e-12) {
                q_in = q_next.max(q_in);
                break;
            }
            q_in = q_next;
        }

        plan = extract_plan(&prob, sc, &x_inc);
        let improvement = q_in - q2;
        q2 = q_in.max(q2);
        state.trace.push(q2);
        if j_main > 0 && improvement <= 0.1 * sc.iter.eps_tol * q2.max(1e-12) {
            converged = true;
            break;
        }
    }
    state.q2 = q2;
    Ok(TrajSolve { plan, q2, state, converged, r_min_factor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::psd_check;
    use crate::{model, sched};

    fn assert_rel(actual: f64, expected: f64, tol: f64) {
        let denom = expected.abs().max(1e-300);
        assert!(((actual - expected) / denom).abs() <= tol, "expected {expected}, got {actual}");
    }

    fn xorshift(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    #[test]
    fn rate_bound_touches_at_reference() {
        let (u_ref, gamma, w) = (3.0e4f64, 12.0, 7.8e3);
        let at_ref = rate_lower_bound(u_ref, u_ref, gamma, 1.0, w).unwrap();
        assert_rel(at_ref, w * (1.0 + gamma / u_ref).log2(), 1e-12);
        assert_eq!(rate_lower_bound(5.0e4, 3.0e4, 0.0, 1.0, w).unwrap(), 0.0);
        assert!(rate_lower_bound(-1.0, 3.0e4, 1.0, 1.0, w).is_err());
    }

    #[test]
    fn rate_bound_is_global_underestimator_sampled() {
        let w = 7.8e3;
        let mut next = xorshift(0x2545F4914F6CDD1D);
        for _ in 0..100_000 {
            let u_ref = 1e4 + 9e5 * next();
            let u = 1e4 + 9e5 * next();
            let gamma = 100.0 * next();
            let bound = rate_lower_bound(u, u_ref, gamma, 1.0, w).unwrap();
            let truth = w * (1.0 + gamma / u).log2();
            assert!(bound <= truth + 1e-12 * truth.abs().max(1.0), "u={u} u_ref={u_ref} gamma={gamma}");
        }
    }

    #[test]
    fn velocity_bound_cases() {
        assert_rel(velocity_lower_bound([3.0, 4.0], [3.0, 4.0]), 25.0, 1e-12);
        assert_eq!(velocity_lower_bound([10.0, -2.0], [0.0, 0.0]), 0.0);
        let mut next = xorshift(0x9E3779B97F4A7C15);
        for _ in 0..10_000 {
            let v = [next() * 100.0 - 50.0, next() * 100.0 - 50.0];
            let vr = [next() * 100.0 - 50.0, next() * 100.0 - 50.0];
            assert!(velocity_lower_bound(v, vr) <= norm_sq(v) + 1e-9);
        }
    }

    #[test]
    fn equivalent_power_matches_flight_model() {
        let mut sc = Scenario::default();
        sc.p_circuit = 0.0;
        let sched0 = Schedule::zeros(sc.users, sc.subcarriers, sc.slots);
        let v = [7.2, 0.0];
        let p = equivalent_power(&sched0, 1, v, 7.2, &sc).unwrap();
        assert_rel(p, 1376.2867, 1e-5);
        // Larger upsilon strictly reduces the induced term.
        let p2 = equivalent_power(&sched0, 1, v, 10.0, &sc).unwrap();
        assert!(p2 < p);
        // upsilon = ||v|| reproduces the true total power exactly.
        let sc2 = Scenario::default();
        let speed = norm([12.0, 5.0]);
        let peq = equivalent_power(&sched0, 1, [12.0, 5.0], speed, &sc2).unwrap();
        let truth = model::total_power(&sched0, 1, [12.0, 5.0], &sc2).unwrap();
        assert_rel(peq, truth, 1e-12);
        assert!(equivalent_power(&sched0, 1, v, 1e-4, &sc).is_err());
    }

    #[test]
    fn sproc_matrix_cases() {
        let sc = Scenario::default();
        let m = sproc_matrix(sc.eaves_est, 0.0, 0.0, &sc);
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[2][2], 0.0);
        assert!(psd_check(&m).unwrap());
        let m = sproc_matrix(sc.eaves_est, 0.0, -1.0, &sc);
        assert!(!psd_check(&m).unwrap());
        let t = [sc.eaves_est[0] + 50.0, sc.eaves_est[1]];
        let m = sproc_matrix(t, 1.0, 1.0e4 + 2500.0, &sc);
        assert!(psd_check(&m).unwrap());
        // Schur scalar agreement: -psi Q^2 + c - ||d||^2/(psi+1) = 1250 >= 0.
        let schur = -1.0 * 1e4 + 12_500.0 - 2500.0 / 2.0;
        assert_rel(schur, 1250.0, 1e-12);
    }

    #[test]
    fn psd_check_matches_schur_scalar_randomized() {
        let sc = Scenario::default();
        let mut next = xorshift(0xD1B54A32D192ED03);
        for _ in 0..100_000 {
            let t = [next() * 2000.0 - 500.0, next() * 2000.0 - 500.0];
            let psi = next() * 5.0;
            let c = next() * 4e4 - 1e4;
            let m = sproc_matrix(t, psi, c, &sc);
            let d = sub(t, sc.eaves_est);
            let scalar = -psi * sc.eaves_radius * sc.eaves_radius + c - norm_sq(d) / (psi + 1.0);
            let tol = 1e-7 * (1.0 + norm_sq(d));
            if scalar > tol {
                assert!(psd_check(&m).unwrap(), "scalar {scalar} says PSD");
            } else if scalar < -tol {
                assert!(!psd_check(&m).unwrap(), "scalar {scalar} says not PSD");
            }
        }
    }

    #[test]
    fn linearized_c_touches_and_minorizes() {
        let sc = Scenario::default();
        let t_ref = [600.0, 300.0];
        let gamma = 10.0;
        let exact = dist_sq(t_ref, sc.eaves_est) + sc.altitude * sc.altitude - gamma / sc.gamma_th;
        assert_rel(linearized_c(t_ref, t_ref, gamma, &sc), exact, 1e-12);
        assert_rel(linearized_c(sc.eaves_est, sc.eaves_est, 0.0, &sc), 1e4, 1e-12);
        let mut next = xorshift(0xA0761D6478BD642F);
        for _ in 0..100_000 {
            let t = [next() * 2000.0 - 500.0, next() * 2000.0 - 500.0];
            let tr = [next() * 2000.0 - 500.0, next() * 2000.0 - 500.0];
            let lin = linearized_c(t, tr, gamma, &sc);
            let truth = dist_sq(t, sc.eaves_est) + sc.altitude * sc.altitude - gamma / sc.gamma_th;
            assert!(lin <= truth + 1e-9 * truth.abs().max(1.0));
        }
    }

    fn small_scenario() -> Scenario {
        let mut sc = Scenario::default();
        sc.slots = 16;
        sc.subcarriers = 4;
        sc.r_min = 0.0;
        sc
    }

    fn reference_state(sc: &Scenario, plan: &FlightPlan) -> ScaState {
        let mut state = ScaState::default();
        state.t_ref = plan.t[1..].to_vec();
        state.v_ref = plan.v.clone();
        state.u_ref = (1..=sc.slots)
            .flat_map(|n| (0..sc.users).map(move |k| (n, k)))
            .map(|(n, k)| dist_sq(sc.user_pos[k], plan.t[n]) + sc.altitude * sc.altitude)
            .collect();
        state
    }

    #[test]
    fn subproblem_feasible_from_straight_line() {
        let sc = small_scenario();
        let plan = FlightPlan::straight_line(&sc);
        let solve = sched::dinkelbach_schedule(&sc, &plan).unwrap();
        let state = reference_state(&sc, &plan);
        let prob = build_subproblem(&sc, &solve.schedule, &state, 0.0).unwrap();
        let x0 = find_interior(&prob, &sc, &plan, None).unwrap();
        for j in 0..prob.num_inequalities() {
            assert!(prob.inequality(j, &x0) < 0.0, "row {j} not strict");
        }
        // q2 = 0 turns the objective into pure rate-bound maximization (the
        // slack regularizer vanishes at the reference point).
        assert_eq!(prob.q2, 0.0);
        let x_ref = pack_reference(&prob, &plan);
        let obj = prob.objective(&x_ref, None);
        assert_rel(obj, -prob.rate_bound_avg(&x_ref), 1e-12);
    }

    #[test]
    fn vacuous_leakage_when_silent() {
        let sc = small_scenario();
        let plan = FlightPlan::straight_line(&sc);
        let schedule = Schedule::zeros(sc.users, sc.subcarriers, sc.slots);
        let state = reference_state(&sc, &plan);
        let prob = build_subproblem(&sc, &schedule, &state, 0.0).unwrap();
        assert!(prob.leak_need.iter().all(|&l| l == 0.0));
        let x0 = find_interior(&prob, &sc, &plan, None).unwrap();
        for n in 1..=sc.slots {
            assert!(prob.schur_value(&x0, n) < 0.0);
        }
    }

    #[test]
    fn trajectory_moves_toward_lone_user_and_beats_straight_line() {
        let mut sc = small_scenario();
        sc.users = 1;
        sc.user_pos = vec![[1000.0, 1000.0]];
        sc.gamma_th = f64::INFINITY;
        let plan0 = FlightPlan::straight_line(&sc);
        let solve = sched::dinkelbach_schedule(&sc, &plan0).unwrap();
        let ee0 = model::energy_efficiency(&solve.schedule, &plan0, &sc).unwrap();
        let out = sca_dinkelbach_trajectory(&sc, &solve.schedule, &plan0).unwrap();
        let ee1 = model::energy_efficiency(&solve.schedule, &out.plan, &sc).unwrap();
        assert!(ee1 > ee0, "optimized {ee1} should beat straight line {ee0}");
        // The path bends toward the user: mid-flight distance shrinks.
        let mid = sc.slots / 2;
        let d_before = dist_sq(sc.user_pos[0], plan0.t[mid]);
        let d_after = dist_sq(sc.user_pos[0], out.plan.t[mid]);
        assert!(d_after < d_before);
    }

    #[test]
    fn q2_trace_monotone_and_plan_exact() {
        let sc = small_scenario();
        let plan0 = FlightPlan::straight_line(&sc);
        let solve = sched::dinkelbach_schedule(&sc, &plan0).unwrap();
        let out = sca_dinkelbach_trajectory(&sc, &solve.schedule, &plan0).unwrap();
        for w in out.state.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "trace {:?}", out.state.trace);
        }
        let plan = &out.plan;
        assert_eq!(plan.t[0], sc.start);
        assert_eq!(plan.t[sc.slots], sc.finish);
        for n in 1..=sc.slots {
            let pred = [
                plan.t[n - 1][0] + plan.v[n - 1][0] * sc.slot_secs,
                plan.t[n - 1][1] + plan.v[n - 1][1] * sc.slot_secs,
            ];
            assert!(norm(sub(pred, plan.t[n])) < 1e-9);
            assert!(norm(plan.v[n - 1]) <= sc.v_max * (1.0 + 1e-9));
            // upsilon = ||v|| at extraction, u tight.
            assert_rel(plan.upsilon[n - 1], norm(plan.v[n - 1]).max(UPSILON_MIN), 1e-12);
            for k in 0..sc.users {
                let need = dist_sq(sc.user_pos[k], plan.t[n]) + sc.altitude * sc.altitude;
                assert!((plan.u_at(k, n, sc.users) - need).abs() <= 1e-9 * need);
            }
        }
        for n in 1..sc.slots {
            assert!(norm(sub(plan.v[n], plan.v[n - 1])) <= sc.v_acc * (1.0 + 1e-9));
        }
        // Bound values never exceed the exact evaluations at the extracted plan.
        let state = reference_state(&sc, plan);
        let prob = build_subproblem(&sc, &solve.schedule, &state, 0.0).unwrap();
        let x = pack_reference(&prob, plan);
        let rate_bound = prob.rate_bound_avg(&x);
        let mut rate_true = 0.0;
        for n in 1..=sc.slots {
            for k in 0..sc.users {
                let h = model::channel_gain(plan.t[n], sc.user_pos[k], sc.altitude, sc.beta0).unwrap();
                for i in 0..sc.subcarriers {
                    let a = solve.schedule.alpha_at(k, i, n);
                    let p = solve.schedule.power_at(k, i, n);
                    rate_true += model::link_rate(a, a * p, h, sc.bandwidth, sc.noise_psd).unwrap();
                }
            }
        }
        rate_true /= sc.slots as f64;
        assert!(rate_bound <= rate_true * (1.0 + 1e-9) + 1e-9);
        let power_eq = prob.power_eq_avg(&x);
        let mut power_true = 0.0;
        for n in 1..=sc.slots {
            power_true += model::total_power(&solve.schedule, n, plan.v[n - 1], &sc).unwrap();
        }
        power_true /= sc.slots as f64;
        assert_rel(power_eq, power_true, 1e-9);
    }

    #[test]
    fn robust_leakage_holds_after_replanning() {
        // After the trajectory moves, the fixed schedule must still satisfy
        // the worst-case leakage bound at every slot.
        let mut sc = small_scenario();
        sc.eaves_radius = 150.0;
        let plan0 = FlightPlan::straight_line(&sc);
        let solve = sched::dinkelbach_schedule(&sc, &plan0).unwrap();
        let out = sca_dinkelbach_trajectory(&sc, &solve.schedule, &plan0).unwrap();
        for n in 1..=sc.slots {
            let d_min = sched::min_eaves_dist_sq(out.plan.t[n], &sc);
            for i in 0..sc.subcarriers {
                for k in 0..sc.users {
                    let p = solve.schedule.power_at(k, i, n) * solve.schedule.alpha_at(k, i, n);
                    let leak =
                        model::snr_leakage(p, sc.beta0, sc.bandwidth, sc.noise_psd, d_min, sc.altitude)
                            .unwrap();
                    assert!(leak <= sc.gamma_th * (1.0 + 1e-6), "slot {n}: leak {leak}");
                }
            }
        }
    }

    #[test]
    fn rejects_infeasible_linearization() {
        let sc = small_scenario();
        let mut plan = FlightPlan::straight_line(&sc);
        plan.v[0] = [sc.v_max * 2.0, 0.0];
        let schedule = Schedule::zeros(sc.users, sc.subcarriers, sc.slots);
        // Kinematics no longer match the stored positions.
        assert!(matches!(
            sca_dinkelbach_trajectory(&sc, &schedule, &plan),
            Err(TrajError::InfeasibleLinearization(_))
        ));
    }
}
