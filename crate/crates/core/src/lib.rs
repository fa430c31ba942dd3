//! Energy-efficient secure UAV-OFDMA planning.
//!
//! A rotary-wing UAV base station serves ground users over OFDMA while a
//! passive eavesdropper of uncertain location listens in. The library jointly
//! optimizes user scheduling, per-subcarrier transmit power, the flight path
//! and the per-slot velocity to maximize bits-per-Joule, subject to peak and
//! total power caps, per-user minimum rates, kinematic limits and a robust
//! worst-case cap on the SNR leaked to the eavesdropper.
//!
//! Module map:
//! - [`model`] — domain types and closed-form physics.
//! - [`convex`] — log-barrier interior-point solver and PSD/ball helpers.
//! - [`sched`] — scheduling + power for a fixed path (Dinkelbach + dual
//!   decomposition with water-filling).
//! - [`traj`] — path + velocity for a fixed schedule (SCA + Dinkelbach over
//!   a per-iteration convex program, S-procedure robustified).
//! - [`alternate`] — the alternating orchestrator, baseline scheme and
//!   independent feasibility audit.
//! - [`oracles`] — brute-force and sampling verifiers for tests.
//! - [`config`] — flat key-value scenario files with dB/dBm ingestion.
//! - [`report`] — run reports, sweeps and trajectory export.

pub mod alternate;
pub mod config;
pub mod convex;
pub mod model;
pub mod oracles;
pub mod report;
pub mod sched;
pub mod traj;
