//! Ergodic linear-quadratic control with random periodic coefficients.
//!
//! The crate simulates controlled linear SDEs whose coefficients are random
//! periodic functionals of the driving Brownian motion, solves the periodic
//! stochastic Riccati equation by Monte Carlo backward regression inside a
//! policy iteration, and estimates the long-run average cost of feedback
//! controls.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod ergodic;
pub mod linalg;
pub mod oracle;
pub mod riccati;
pub mod sde;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Mat;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
