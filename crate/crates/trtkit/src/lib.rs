//! Simulation and reconstruction toolkit for photon-efficient transient
//! imaging: LOS single-photon LiDAR and confocal NLOS forward models,
//! a time-resolved transformer with verified gradients, classical
//! baselines, and a training/evaluation harness.

pub mod ad;
pub mod attention;
pub mod baselines;
pub mod data;
pub mod fk;
pub mod harness;
pub mod los_sim;
pub mod nlos_sim;
pub mod par;
pub mod pulse;
pub mod trt_los;
pub mod trt_nlos;

/// Speed of light in m/s, used for every bin/depth conversion.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
