//! Flat key-value scenario files. One `key = value` per line, `#` comments,
//! unknown keys rejected with line context. Omitted keys fall back to the
//! stock defaults. dB keys carry a `_db` suffix, dBm keys `_dbm`; both are
//! converted to linear SI at ingestion and nowhere else.

use std::path::Path;

use thiserror::Error;

use crate::model::{validate_scenario, Point, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scenario invalid: {0:?}")]
    Invalid(Vec<String>),
}

#[inline]
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[inline]
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Loads a scenario file, applying defaults for omitted keys and validating
/// the result. An empty file yields the stock scenario.
pub fn load_config(path: &Path) -> Result<Scenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Scenario, ConfigError> {
    let mut sc = Scenario::default();
    for (ix, raw) in text.lines().enumerate() {
        let line = ix + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(ConfigError::Parse { line, msg: format!("expected `key = value`, got `{stripped}`") });
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut sc, key, value).map_err(|msg| ConfigError::Parse { line, msg })?;
    }
    let diag = validate_scenario(&sc);
    if !diag.is_valid() {
        return Err(ConfigError::Invalid(diag.violations));
    }
    Ok(sc)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    value.parse::<f64>().map_err(|_| format!("key `{key}`: `{value}` is not a number"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize, String> {
    value.parse::<usize>().map_err(|_| format!("key `{key}`: `{value}` is not a count"))
}

fn parse_point(key: &str, value: &str) -> Result<Point, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("key `{key}`: expected `x,y`, got `{value}`"));
    }
    Ok([parse_f64(key, parts[0])?, parse_f64(key, parts[1])?])
}

fn apply_key(sc: &mut Scenario, key: &str, value: &str) -> Result<(), String> {
    match key {
        "users" => sc.users = parse_usize(key, value)?,
        "subcarriers" => sc.subcarriers = parse_usize(key, value)?,
        "slots" => sc.slots = parse_usize(key, value)?,
        "slot_secs" => sc.slot_secs = parse_f64(key, value)?,
        "altitude_m" => sc.altitude = parse_f64(key, value)?,
        "user_pos" => {
            let mut pos = Vec::new();
            for part in value.split(';') {
                let part = part.trim();
                if !part.is_empty() {
                    pos.push(parse_point(key, part)?);
                }
            }
            if pos.is_empty() {
                return Err("key `user_pos`: at least one `x,y` pair required".into());
            }
            sc.users = pos.len();
            sc.user_pos = pos;
        }
        "eaves_est" => sc.eaves_est = parse_point(key, value)?,
        "eaves_radius_m" => sc.eaves_radius = parse_f64(key, value)?,
        "start" => sc.start = parse_point(key, value)?,
        "finish" => sc.finish = parse_point(key, value)?,
        "bandwidth_hz" => sc.bandwidth = parse_f64(key, value)?,
        "noise_psd_w_hz" => sc.noise_psd = parse_f64(key, value)?,
        "noise_psd_dbm_hz" => sc.noise_psd = dbm_to_watts(parse_f64(key, value)?),
        "beta0" => sc.beta0 = parse_f64(key, value)?,
        "beta0_db" => sc.beta0 = db_to_linear(parse_f64(key, value)?),
        "p_peak_w" => sc.p_peak = parse_f64(key, value)?,
        "p_max_w" => sc.p_max = parse_f64(key, value)?,
        "p_max_dbm" => sc.p_max = dbm_to_watts(parse_f64(key, value)?),
        "p_circuit_w" => sc.p_circuit = parse_f64(key, value)?,
        "p_circuit_dbm" => sc.p_circuit = dbm_to_watts(parse_f64(key, value)?),
        "r_min_bps" => sc.r_min = parse_f64(key, value)?,
        "gamma_th" => sc.gamma_th = parse_f64(key, value)?,
        "gamma_th_db" => sc.gamma_th = db_to_linear(parse_f64(key, value)?),
        "v_max_mps" => sc.v_max = parse_f64(key, value)?,
        "v_acc_mps" => sc.v_acc = parse_f64(key, value)?,
        "omega_rad_s" => sc.flight.omega = parse_f64(key, value)?,
        "rotor_radius_m" => sc.flight.rotor_radius = parse_f64(key, value)?,
        "air_density_kgm3" => sc.flight.air_density = parse_f64(key, value)?,
        "solidity" => sc.flight.solidity = parse_f64(key, value)?,
        "disc_area_m2" => sc.flight.disc_area = parse_f64(key, value)?,
        "blade_power_w" => sc.flight.blade_power = parse_f64(key, value)?,
        "induced_power_w" => sc.flight.induced_power = parse_f64(key, value)?,
        "induced_speed_mps" => sc.flight.induced_speed = parse_f64(key, value)?,
        "drag_ratio" => sc.flight.drag_ratio = parse_f64(key, value)?,
        "g_max" => sc.iter.g_max = parse_usize(key, value)?,
        "j_max" => sc.iter.j_max = parse_usize(key, value)?,
        "j_inner_max" => sc.iter.j_inner_max = parse_usize(key, value)?,
        "l_max" => sc.iter.l_max = parse_usize(key, value)?,
        "eps_tol" => sc.iter.eps_tol = parse_f64(key, value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}
