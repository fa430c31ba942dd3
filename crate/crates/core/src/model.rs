//! Domain types and the closed-form physics every solver evaluates: free-space
//! channel gains, per-subcarrier rates, SNR leakage towards the eavesdropper,
//! rotary-wing flight power and the bits-per-Joule energy-efficiency objective.
//!
//! All quantities are SI internally (W, Hz, m, s, bit). dB/dBm values are
//! converted once at config ingestion, never here. Rates are in bits (log2).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Horizontal coordinate in meters.
pub type Point = [f64; 2];

/// Hard floor for flight-power evaluation, m/s. The induced-power term of the
/// rotary-wing model diverges at hover, so speeds below this are rejected.
pub const EPS_SPEED: f64 = 1e-2;

/// Floor for the slack speed variable in the trajectory solver, m/s.
pub const UPSILON_MIN: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("negative power {0} W")]
    NegativePower(f64),
    #[error("speed {0} m/s below hover-singularity floor {EPS_SPEED} m/s")]
    HoverSingularity(f64),
    #[error("eavesdropper distance^2 {d_sq} m^2 below altitude^2 {alt_sq} m^2")]
    GeometryViolation { d_sq: f64, alt_sq: f64 },
    #[error("slack speed {0} m/s below floor {UPSILON_MIN} m/s")]
    SlackSpeedFloor(f64),
    #[error("slot index {0} out of range 1..={1}")]
    SlotOutOfRange(usize, usize),
}

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn norm_sq(a: Point) -> f64 {
    a[0] * a[0] + a[1] * a[1]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq(a: Point, b: Point) -> f64 {
    norm_sq(sub(a, b))
}

/// Rotary-wing flight power constants.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlightConsts {
    /// Blade angular velocity, rad/s.
    pub omega: f64,
    /// Rotor radius, m.
    pub rotor_radius: f64,
    /// Air density, kg/m^3.
    pub air_density: f64,
    /// Rotor solidity.
    pub solidity: f64,
    /// Rotor disc area, m^2.
    pub disc_area: f64,
    /// Blade profile power in hover, W.
    pub blade_power: f64,
    /// Induced power in hover, W.
    pub induced_power: f64,
    /// Mean rotor induced velocity in forward flight, m/s.
    pub induced_speed: f64,
    /// Fuselage drag ratio.
    pub drag_ratio: f64,
}

impl Default for FlightConsts {
    fn default() -> Self {
        Self {
            omega: 400.0,
            rotor_radius: 0.5,
            air_density: 1.225,
            solidity: 0.05,
            disc_area: 0.79,
            blade_power: 580.65,
            induced_power: 790.67,
            induced_speed: 7.2,
            drag_ratio: 0.3,
        }
    }
}

/// Iteration limits and the shared convergence tolerance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterLimits {
    /// Dinkelbach iterations for the scheduling sub-problem.
    pub g_max: usize,
    /// SCA main-loop iterations for the trajectory sub-problem.
    pub j_max: usize,
    /// Dinkelbach inner iterations per SCA main loop.
    pub j_inner_max: usize,
    /// Alternating outer iterations.
    pub l_max: usize,
    /// Relative convergence tolerance shared by all loops.
    pub eps_tol: f64,
}

impl Default for IterLimits {
    fn default() -> Self {
        // j_max is a per-call budget that the SCA loop rarely exhausts (its
        // main loop self-terminates); the headroom matters on long horizons.
        Self { g_max: 10, j_max: 40, j_inner_max: 20, l_max: 8, eps_tol: 1e-3 }
    }
}

/// Immutable problem instance: geometry, radio constants, power constants and
/// limits for one planning horizon.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scenario {
    /// Number of ground users K.
    pub users: usize,
    /// Number of subcarriers.
    pub subcarriers: usize,
    /// Number of time slots.
    pub slots: usize,
    /// Slot duration, s.
    pub slot_secs: f64,
    /// UAV altitude, m.
    pub altitude: f64,
    /// Ground user horizontal positions, m.
    pub user_pos: Vec<Point>,
    /// Estimated eavesdropper position, m.
    pub eaves_est: Point,
    /// Radius of the eavesdropper uncertainty disc, m.
    pub eaves_radius: f64,
    /// UAV start position, m.
    pub start: Point,
    /// UAV final position, m.
    pub finish: Point,
    /// Subcarrier bandwidth, Hz.
    pub bandwidth: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Reference channel power gain at 1 m.
    pub beta0: f64,
    /// Peak transmit power per slot, W.
    pub p_peak: f64,
    /// Total power cap per slot, W.
    pub p_max: f64,
    /// Circuit power, W.
    pub p_circuit: f64,
    /// Minimum average per-user rate, bit/s.
    pub r_min: f64,
    /// Maximum tolerable SNR leakage at the eavesdropper.
    pub gamma_th: f64,
    /// Maximum speed, m/s.
    pub v_max: f64,
    /// Maximum per-slot speed change, m/s.
    pub v_acc: f64,
    pub flight: FlightConsts,
    pub iter: IterLimits,
}

impl Default for Scenario {
    /// The stock simulation setting: three users in the upper-right quadrant,
    /// the eavesdropper estimate halfway along the diagonal, 128 subcarriers
    /// over 50 two-second slots.
    fn default() -> Self {
        Self {
            users: 3,
            subcarriers: 128,
            slots: 50,
            slot_secs: 2.0,
            altitude: 100.0,
            user_pos: vec![[700.0, 900.0], [900.0, 900.0], [900.0, 700.0]],
            eaves_est: [400.0, 400.0],
            eaves_radius: 100.0,
            start: [0.0, 0.0],
            finish: [1000.0, 1000.0],
            bandwidth: 7.8e3,
            noise_psd: 1e-14,
            beta0: 1e-5,
            p_peak: 1.0,
            p_max: 10f64.powf(3.5),
            p_circuit: 1.0,
            r_min: 2.0,
            gamma_th: 1e-4,
            v_max: 50.0,
            v_acc: 5.0,
            flight: FlightConsts::default(),
            iter: IterLimits::default(),
        }
    }
}

impl Scenario {
    /// Reduced profile for quick experiments: same geometry and radio
    /// constants, fewer slots and subcarriers.
    pub fn smoke(&self) -> Self {
        let mut s = self.clone();
        s.slots = 20;
        s.subcarriers = 16;
        s
    }

    /// Effective gain h' = h / (W N0) so that `p * h'` is the link SNR.
    pub fn effective_gain(&self, t_uav: Point, user: usize) -> f64 {
        let h = self.beta0 / (dist_sq(self.user_pos[user], t_uav) + self.altitude * self.altitude);
        h / (self.bandwidth * self.noise_psd)
    }
}

/// Per-(user, subcarrier, slot) scheduling fractions and transmit powers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Schedule {
    pub users: usize,
    pub subcarriers: usize,
    pub slots: usize,
    /// Scheduling fractions, `[0, 1]`, laid out as `(slot, subcarrier, user)`.
    pub alpha: Vec<f64>,
    /// Transmit powers, W, same layout.
    pub power: Vec<f64>,
    /// Auxiliary products alpha * power when tracked by a solver.
    pub ptilde: Option<Vec<f64>>,
}

impl Schedule {
    pub fn zeros(users: usize, subcarriers: usize, slots: usize) -> Self {
        let len = users * subcarriers * slots;
        Self { users, subcarriers, slots, alpha: vec![0.0; len], power: vec![0.0; len], ptilde: None }
    }

    /// Flat index for user `k`, subcarrier `i`, slot `n` (1-based slot).
    #[inline]
    pub fn idx(&self, k: usize, i: usize, n: usize) -> usize {
        debug_assert!(n >= 1 && n <= self.slots);
        ((n - 1) * self.subcarriers + i) * self.users + k
    }

    #[inline]
    pub fn alpha_at(&self, k: usize, i: usize, n: usize) -> f64 {
        self.alpha[self.idx(k, i, n)]
    }

    #[inline]
    pub fn power_at(&self, k: usize, i: usize, n: usize) -> f64 {
        self.power[self.idx(k, i, n)]
    }

    /// Sum of alpha * p over users and subcarriers at slot `n`.
    pub fn transmit_sum(&self, n: usize) -> f64 {
        let base = (n - 1) * self.subcarriers * self.users;
        let len = self.subcarriers * self.users;
        (base..base + len).map(|j| self.alpha[j] * self.power[j]).sum()
    }
}

/// UAV positions, velocities and the trajectory-solver slack variables.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlightPlan {
    /// Horizontal positions t[0..=N], m.
    pub t: Vec<Point>,
    /// Velocities v[1..=N] stored 0-based; v[n] carries the UAV from t[n-1] to t[n].
    pub v: Vec<Point>,
    /// Slack upper bounds on squared UAV-user distance, `(slot, user)` layout, m^2.
    pub u: Vec<f64>,
    /// Slack speed lower proxies, m/s.
    pub upsilon: Vec<f64>,
    /// S-procedure certificates, one per slot.
    pub psi: Vec<f64>,
}

impl FlightPlan {
    /// Straight line from start to finish at constant cruising velocity.
    pub fn straight_line(sc: &Scenario) -> Self {
        let n = sc.slots;
        let v = [
            (sc.finish[0] - sc.start[0]) / (n as f64 * sc.slot_secs),
            (sc.finish[1] - sc.start[1]) / (n as f64 * sc.slot_secs),
        ];
        Self::from_velocities(sc, &vec![v; n])
    }

    /// Builds positions by exact kinematic accumulation and fills the slacks
    /// tight: u at the squared distances, upsilon at the speeds.
    pub fn from_velocities(sc: &Scenario, vels: &[Point]) -> Self {
        assert_eq!(vels.len(), sc.slots);
        let mut t = Vec::with_capacity(sc.slots + 1);
        t.push(sc.start);
        for v in vels {
            let last = *t.last().unwrap();
            t.push([last[0] + v[0] * sc.slot_secs, last[1] + v[1] * sc.slot_secs]);
        }
        let mut u = Vec::with_capacity(sc.slots * sc.users);
        for n in 1..=sc.slots {
            for k in 0..sc.users {
                u.push(dist_sq(sc.user_pos[k], t[n]) + sc.altitude * sc.altitude);
            }
        }
        let upsilon = vels.iter().map(|v| norm(*v).max(UPSILON_MIN)).collect();
        let psi = t[1..]
            .iter()
            .map(|tn| {
                if sc.eaves_radius > 0.0 {
                    (norm(sub(*tn, sc.eaves_est)) / sc.eaves_radius - 1.0).max(0.0)
                } else {
                    0.0
                }
            })
            .collect();
        Self { t, v: vels.to_vec(), u, upsilon, psi }
    }

    #[inline]
    pub fn u_at(&self, k: usize, n: usize, users: usize) -> f64 {
        self.u[(n - 1) * users + k]
    }

    pub fn slots(&self) -> usize {
        self.v.len()
    }
}

/// A complete resource-allocation and trajectory design with its objective
/// value and feasibility residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    pub schedule: Schedule,
    pub plan: FlightPlan,
    /// Energy efficiency, bit/J.
    pub ee: f64,
    /// Residual summary from the independent constraint audit.
    pub feasibility: Vec<Residual>,
}

/// One audited constraint residual; positive means violated by that much.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Residual {
    pub name: String,
    pub value: f64,
}

/// Scenario diagnostics: violated invariants plus the secrecy-guarantee flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDiagnostics {
    pub violations: Vec<String>,
    /// True when r_min exceeds the per-subcarrier leakage rate bound.
    pub secrecy_guaranteed: bool,
    /// r_min - W log2(1 + gamma_th), bit/s.
    pub secrecy_margin: f64,
}

impl ScenarioDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Free-space channel power gain beta0 / (||t_user - t_uav||^2 + H^2).
pub fn channel_gain(t_uav: Point, t_user: Point, altitude: f64, beta0: f64) -> Result<f64, ModelError> {
    if !(t_uav[0].is_finite() && t_uav[1].is_finite() && t_user[0].is_finite() && t_user[1].is_finite()) {
        return Err(ModelError::NonFinite("coordinate"));
    }
    if !altitude.is_finite() || altitude <= 0.0 {
        return Err(ModelError::NonFinite("altitude"));
    }
    if !beta0.is_finite() || beta0 <= 0.0 {
        return Err(ModelError::NonFinite("beta0"));
    }
    Ok(beta0 / (dist_sq(t_user, t_uav) + altitude * altitude))
}

/// Perspective-form rate W alpha log2(1 + ptilde h / (W N0 alpha)), bit/s,
/// with the continuous extension 0 at alpha = 0.
pub fn link_rate(alpha: f64, ptilde: f64, gain: f64, w_hz: f64, n0: f64) -> Result<f64, ModelError> {
    if ptilde < 0.0 {
        return Err(ModelError::NegativePower(ptilde));
    }
    if alpha <= 0.0 || ptilde == 0.0 {
        return Ok(0.0);
    }
    let snr = ptilde * gain / (w_hz * n0 * alpha);
    Ok(w_hz * alpha * (1.0 + snr).log2())
}

/// SNR observed by the eavesdropper: p beta0 / (W N0 d_E^2).
pub fn snr_leakage(p: f64, beta0: f64, w_hz: f64, n0: f64, d_e_sq: f64, altitude: f64) -> Result<f64, ModelError> {
    if p < 0.0 {
        return Err(ModelError::NegativePower(p));
    }
    let alt_sq = altitude * altitude;
    if d_e_sq < alt_sq {
        return Err(ModelError::GeometryViolation { d_sq: d_e_sq, alt_sq });
    }
    Ok(p * beta0 / (w_hz * n0 * d_e_sq))
}

/// The three terms of the rotary-wing model: blade profile, induced, parasite.
pub fn flight_power_components(v: Point, c: &FlightConsts) -> Result<[f64; 3], ModelError> {
    let speed = norm(v);
    if !speed.is_finite() {
        return Err(ModelError::NonFinite("velocity"));
    }
    if speed < EPS_SPEED {
        return Err(ModelError::HoverSingularity(speed));
    }
    let tip = c.omega * c.rotor_radius;
    let profile = c.blade_power * (1.0 + 3.0 * speed * speed / (tip * tip));
    let induced = c.induced_power * c.induced_speed / speed;
    let parasite = 0.5 * c.drag_ratio * c.air_density * c.solidity * c.disc_area * speed.powi(3);
    Ok([profile, induced, parasite])
}

/// Flight power at velocity `v`, W.
pub fn flight_power(v: Point, c: &FlightConsts) -> Result<f64, ModelError> {
    flight_power_components(v, c).map(|t| t[0] + t[1] + t[2])
}

/// Total power at slot `n`: transmit sum + circuit + flight.
pub fn total_power(schedule: &Schedule, n: usize, v_n: Point, sc: &Scenario) -> Result<f64, ModelError> {
    if n < 1 || n > schedule.slots {
        return Err(ModelError::SlotOutOfRange(n, schedule.slots));
    }
    Ok(schedule.transmit_sum(n) + sc.p_circuit + flight_power(v_n, &sc.flight)?)
}

/// System energy efficiency: average sum rate over average total power, bit/J.
pub fn energy_efficiency(schedule: &Schedule, plan: &FlightPlan, sc: &Scenario) -> Result<f64, ModelError> {
    let mut rate_sum = 0.0;
    let mut power_sum = 0.0;
    for n in 1..=sc.slots {
        for k in 0..sc.users {
            let h = channel_gain(plan.t[n], sc.user_pos[k], sc.altitude, sc.beta0)?;
            for i in 0..sc.subcarriers {
                let a = schedule.alpha_at(k, i, n);
                let p = schedule.power_at(k, i, n);
                rate_sum += link_rate(a, a * p, h, sc.bandwidth, sc.noise_psd)?;
            }
        }
        power_sum += total_power(schedule, n, plan.v[n - 1], sc)?;
    }
    Ok(rate_sum / power_sum)
}

/// Secrecy-guarantee margin: r_min - W log2(1 + gamma_th), bit/s.
pub fn secrecy_margin(sc: &Scenario) -> f64 {
    sc.r_min - sc.bandwidth * (1.0 + sc.gamma_th).log2()
}

/// Checks every scenario invariant and reports the violations as diagnostics.
pub fn validate_scenario(sc: &Scenario) -> ScenarioDiagnostics {
    let mut violations = Vec::new();
    let mut check = |ok: bool, msg: &str| {
        if !ok {
            violations.push(msg.to_string());
        }
    };
    check(sc.users >= 1, "users must be >= 1");
    check(sc.subcarriers >= 1, "subcarriers must be >= 1");
    check(sc.slots >= 2, "slots must be >= 2");
    check(sc.slot_secs > 0.0, "slot duration must be positive");
    check(sc.altitude > 0.0, "altitude must be positive");
    check(sc.eaves_radius >= 0.0, "uncertainty radius must be non-negative");
    check(sc.bandwidth > 0.0, "subcarrier bandwidth must be positive");
    check(sc.noise_psd > 0.0, "noise PSD must be positive");
    check(sc.beta0 > 0.0, "beta0 must be positive");
    check(sc.p_peak > 0.0, "peak power must be positive");
    check(sc.p_peak <= sc.p_max, "peak power must not exceed total power cap");
    check(sc.p_circuit >= 0.0, "circuit power must be non-negative");
    check(sc.r_min >= 0.0, "minimum rate must be non-negative");
    check(sc.gamma_th >= 0.0, "leakage threshold must be non-negative");
    check(sc.v_max > 0.0, "maximum speed must be positive");
    check(sc.v_acc > 0.0, "maximum speed change must be positive");
    check(sc.user_pos.len() == sc.users, "user position count must match user count");
    let all_finite = sc.user_pos.iter().chain([&sc.start, &sc.finish, &sc.eaves_est]).all(|p| p[0].is_finite() && p[1].is_finite());
    check(all_finite, "coordinates must be finite");
    let reach = norm(sub(sc.finish, sc.start));
    check(
        reach <= sc.slots as f64 * sc.slot_secs * sc.v_max,
        "final position unreachable: ||finish - start|| exceeds slots * slot_secs * v_max",
    );
    let margin = secrecy_margin(sc);
    ScenarioDiagnostics { violations, secrecy_guaranteed: margin > 0.0, secrecy_margin: margin }
}
