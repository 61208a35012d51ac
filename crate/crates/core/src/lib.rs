//! Simulation and calibration toolkit for a magnetically transduced
//! fingertip force sensor.
//!
//! The sensor embeds a small magnet in an elastic bump over a 3-axis Hall
//! element; applied force displaces the magnet and shifts the measured
//! field. This crate provides the pieces needed to exercise that pipeline
//! end to end without hardware:
//!
//! * [`geometry`]: fingertip shell layout, taxel poses and local frames.
//! * [`forward`]: force -> displacement -> field -> quantized counts
//!   simulation, plus scripted force profiles and dataset generation.
//! * [`acquisition`]: wire-frame encoding, stream merging by nearest
//!   timestamp, and the versioned CSV log format.
//! * [`calibration`]: quadratic least-squares fit from counts to force and
//!   the model file format.
//! * [`metrics`]: per-axis MAE/RMSE and evaluation report rendering.

pub mod acquisition;
pub mod calibration;
pub mod forward;
pub mod geometry;
pub mod metrics;
