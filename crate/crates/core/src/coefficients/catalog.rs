//! Built-in scenarios.

use super::{CoefficientFn, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;

const NAMES: [&str; 5] = [
    "scalar-constant",
    "scalar-noisy-constant",
    "scalar-cross-term",
    "scalar-random-periodic",
    "planar-deterministic-periodic",
];

pub fn catalog_names() -> &'static [&'static str] {
    &NAMES
}

fn c(v: f64) -> CoefficientFn {
    CoefficientFn::scalar(v)
}

fn tanh(base: f64, amp: f64) -> Result<CoefficientFn> {
    CoefficientFn::tanh_of_increments(Mat::scalar(base), Mat::scalar(amp), 1.0)
}

fn scalar_constant(name: &str, noise: f64) -> Result<PeriodicCoefficientSet> {
    PeriodicCoefficientSet::new(name, 1.0, c(-1.0), c(1.0), c(1.0), c(1.0))?
        .with_noise(c(noise), c(1.0))?
        .with_drift(c(1.0))?
        .with_stabilizer(c(0.0))
}

pub fn builtin_scenario(name: &str) -> Result<PeriodicCoefficientSet> {
    match name {
        // a = -1, b = 1, c = 0, Q = R = 1, σ = 1 and constant drift 1.
        "scalar-constant" => scalar_constant(name, 0.0),
        // As above with multiplicative noise c = 1.
        "scalar-noisy-constant" => scalar_constant(name, 1.0),
        // Constant scalar data exercising every cost term.
        "scalar-cross-term" => PeriodicCoefficientSet::new(name, 1.0, c(-1.0), c(1.0), c(2.0), c(1.0))?
            .with_noise(c(0.5), c(0.5))?
            .with_drift(c(0.5))?
            .with_cross_and_linear(c(0.5), c(0.2), c(0.1))?
            .with_stabilizer(c(0.0)),
        "scalar-random-periodic" => PeriodicCoefficientSet::new(
            name,
            1.0,
            tanh(-1.0, 0.5)?,
            c(1.0),
            tanh(1.0, 0.5)?,
            c(1.0),
        )?
        .with_noise(tanh(0.0, 0.3)?, tanh(1.0, 0.25)?)?
        .with_drift(c(1.0))?
        .with_stabilizer(c(0.0)),
        "planar-deterministic-periodic" => {
            let tau = 1.0;
            let z2 = Mat::zeros(2, 2);
            let a = CoefficientFn::harmonic(
                tau,
                Mat::from_rows(&[vec![-1.0, 0.5], vec![-0.5, -1.5]]),
                Mat::identity(2).scale(0.3),
                z2,
                1,
            )?;
            let b = CoefficientFn::constant(Mat::column(&[0.0, 1.0]));
            let noise = CoefficientFn::harmonic(tau, Mat::identity(2).scale(0.2), z2, Mat::identity(2).scale(0.05), 1)?;
            let q = CoefficientFn::harmonic(
                tau,
                Mat::identity(2),
                Mat::from_rows(&[vec![0.3, 0.0], vec![0.0, 0.0]]),
                z2,
                1,
            )?;
            PeriodicCoefficientSet::new(name, tau, a, b, q, c(1.0))?
                .with_noise(noise, CoefficientFn::constant(Mat::column(&[0.3, 0.2])))?
                .with_drift(CoefficientFn::constant(Mat::column(&[0.2, -0.1])))?
                .with_stabilizer(CoefficientFn::zeros(1, 2))
        }
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}
