//! Finite-horizon stochastic linear-quadratic control with possibly
//! irregular Riccati equations.
//!
//! The pipeline: [`problem`] loads an instance, [`riccati`] integrates the
//! base equation, [`layering`] reduces irregular problems layer by layer,
//! [`synthesis`] steers the final reduced system onto its terminal
//! constraint, and [`simulate`] checks the result by Monte Carlo.

pub mod matops;
pub mod problem;
pub mod riccati;
pub mod layering;
pub mod synthesis;
pub mod simulate;
pub mod cli;
