//! Deterministic reference solutions: explicit scalar moments, the constant
//! scalar algebraic Riccati equation, and periodic Riccati, Lyapunov and
//! linear ODEs obtained by shooting on the terminal value.

use crate::coefficients::{PathPoint, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use serde::Serialize;
use std::io::Write;

pub const DEFAULT_NODES_PER_PERIOD: usize = 1024;
const SHOOTING_TOL: f64 = 1e-10;
const SHOOTING_MAX_ITER: usize = 100_000;
const DIVERGENCE_LIMIT: f64 = 1e12;

/// `E|Φ_t|² = exp(∫₀ᵗ (2a + c²) ds)` for scalar deterministic `a`, `c`,
/// integrated by composite Simpson's rule.
pub fn explicit_phi_moment_1d<A, C>(a: A, c: C, t: f64) -> f64
where
    A: Fn(f64) -> f64,
    C: Fn(f64) -> f64,
{
    if t == 0.0 {
        return 1.0;
    }
    let n = 4096;
    let h = t / n as f64;
    let g = |s: f64| 2.0 * a(s) + c(s) * c(s);
    let mut acc = g(0.0) + g(t);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(i as f64 * h);
    }
    (acc * h / 3.0).exp()
}

/// Positive root of `(2ã + c²)k + q̃ − k²b²/r = 0` with `ã = a − bs/r` and
/// `q̃ = q − s²/r`, the stationary scalar Riccati equation.
pub fn algebraic_riccati_scalar(a: f64, b: f64, c: f64, q: f64, s: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::NoPositiveRoot(format!("r = {r} must be positive")));
    }
    let a_t = a - b * s / r;
    let q_t = q - s * s / r;
    if !(q_t > 0.0) {
        return Err(Error::NoPositiveRoot(format!("q - s^2/r = {q_t} must be positive")));
    }
    let p = 2.0 * a_t + c * c;
    let g = b * b / r;
    if g == 0.0 {
        if p < 0.0 {
            return Ok(-q_t / p);
        }
        return Err(Error::NoPositiveRoot(format!(
            "no control authority and 2a + c^2 = {p} is not negative"
        )));
    }
    Ok((p + (p * p + 4.0 * q_t * g).sqrt()) / (2.0 * g))
}

/// Stationary optimal chain of a constant scalar problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryChain {
    pub k: f64,
    pub theta: f64,
    pub eta: f64,
    pub offset: f64,
    pub value: f64,
}

/// `K` from the algebraic equation, `Θ = −(bK + s)/r`, `η` from the linear
/// stationary equation with `ζ = 0`, `v = −(bη + ρ)/r` and the value
/// `−(bη + ρ)²/r + Kσ² + 2η·drift`.
pub fn stationary_chain_scalar(set: &PeriodicCoefficientSet) -> Result<StationaryChain> {
    if set.n != 1 || set.m != 1 || !set.is_constant() {
        return Err(Error::InvalidArgument(format!(
            "scenario `{}` is not a constant scalar problem",
            set.name
        )));
    }
    let c = at(set, 0.0);
    let g = |m: Mat| m.get(0, 0);
    let (a, b, cc, q, s, r) = (g(c.a), g(c.b), g(c.c), g(c.q), g(c.s), g(c.r));
    let k = algebraic_riccati_scalar(a, b, cc, q, s, r)?;
    let theta = -(b * k + s) / r;
    let a_cl = a + b * theta;
    if a_cl == 0.0 {
        return Err(Error::NoPositiveRoot("closed-loop drift vanishes".into()));
    }
    let eta = -(k * g(c.drift) + cc * k * g(c.sigma) + g(c.q_lin) + theta * g(c.rho)) / a_cl;
    let w = b * eta + g(c.rho);
    Ok(StationaryChain {
        k,
        theta,
        eta,
        offset: -w / r,
        value: -w * w / r + k * g(c.sigma).powi(2) + 2.0 * eta * g(c.drift),
    })
}

/// Node values of a periodic ODE solution on `[0, τ]`.
#[derive(Debug, Clone, Serialize)]
pub struct OdeSolution {
    pub tau: f64,
    pub times: Vec<f64>,
    pub values: Vec<Mat>,
    /// `|K(0) − K(τ)|_F` after shooting.
    pub periodic_residual: f64,
    pub iterations: usize,
}

impl OdeSolution {
    /// Linear interpolation at `t ∈ [0, τ]`.
    pub fn at(&self, t: f64) -> Mat {
        let n = self.values.len() - 1;
        let x = (t / self.tau * n as f64).clamp(0.0, n as f64);
        let i = (x.floor() as usize).min(n - 1);
        let w = x - i as f64;
        self.values[i].scale(1.0 - w).axpy(w, &self.values[i + 1])
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.values
            .iter()
            .filter(|m| m.rows() == m.cols())
            .map(Mat::asymmetry)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (rows, cols) = self.values[0].shape();
        write!(w, "t")?;
        for i in 0..rows {
            for j in 0..cols {
                if cols == 1 {
                    write!(w, ",v{i}")?;
                } else {
                    write!(w, ",v{i}{j}")?;
                }
            }
        }
        writeln!(w)?;
        for (t, m) in self.times.iter().zip(&self.values) {
            write!(w, "{t}")?;
            for v in m.entries() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Backward RK4 sweep of `y' = −f(t, y)` from `t = τ` to `0`; returns node
/// values ordered by increasing time.
fn rk4_backward<F>(f: &F, terminal: &[Mat], tau: f64, nodes: usize) -> Vec<Vec<Mat>>
where
    F: Fn(f64, &[Mat]) -> Vec<Mat>,
{
    let h = tau / nodes as f64;
    let mut out = vec![Vec::new(); nodes + 1];
    let mut y = terminal.to_vec();
    out[nodes] = y.clone();
    let add = |y: &[Mat], k: &[Mat], s: f64| -> Vec<Mat> { y.iter().zip(k).map(|(a, b)| a.axpy(s, b)).collect() };
    for i in (0..nodes).rev() {
        let t = (i + 1) as f64 * h;
        // Integrating backwards: dy/d(−t) = f.
        let k1 = f(t, &y);
        let k2 = f(t - 0.5 * h, &add(&y, &k1, 0.5 * h));
        let k3 = f(t - 0.5 * h, &add(&y, &k2, 0.5 * h));
        let k4 = f(t - h, &add(&y, &k3, h));
        y = y
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.axpy(h / 6.0, &k1[j])
                    .axpy(h / 3.0, &k2[j])
                    .axpy(h / 3.0, &k3[j])
                    .axpy(h / 6.0, &k4[j])
            })
            .collect();
        out[i] = y.clone();
    }
    out
}

/// Fixed point on the terminal value: `P ← y(0; y(τ) = P)`.
fn shoot<F>(f: &F, init: Vec<Mat>, tau: f64, nodes: usize, fixed: usize) -> Result<(Vec<Vec<Mat>>, f64, usize)>
where
    F: Fn(f64, &[Mat]) -> Vec<Mat>,
{
    let mut p = init;
    for it in 1..=SHOOTING_MAX_ITER {
        let sweep = rk4_backward(f, &p, tau, nodes);
        let residual: f64 = (fixed..p.len())
            .map(|j| (sweep[0][j] - p[j]).frobenius())
            .fold(0.0, f64::max);
        let size = sweep[0].iter().map(Mat::max_abs).fold(0.0, f64::max);
        if !size.is_finite() || size > DIVERGENCE_LIMIT {
            return Err(Error::ShootingDiverged { iterations: it, residual });
        }
        if residual < SHOOTING_TOL {
            return Ok((sweep, residual, it));
        }
        let len = p.len();
        p[fixed..].copy_from_slice(&sweep[0][fixed..len]);
    }
    Err(Error::ShootingDiverged {
        iterations: SHOOTING_MAX_ITER,
        residual: f64::NAN,
    })
}

fn require_deterministic(set: &PeriodicCoefficientSet) -> Result<()> {
    if !set.is_deterministic() {
        return Err(Error::InvalidArgument(format!(
            "scenario `{}` has path-dependent coefficients; the ODE oracle needs deterministic data",
            set.name
        )));
    }
    Ok(())
}

fn at(set: &PeriodicCoefficientSet, t: f64) -> crate::coefficients::CoeffSample {
    set.sample(&PathPoint::deterministic(t))
}

/// Riccati right-hand side `KÃ + ÃᵀK + CᵀKC + Q̃ − KBR⁻¹BᵀK` with the cross
/// term reduced; `K' = −rhs`.
fn riccati_rhs(set: &PeriodicCoefficientSet, t: f64, k: &Mat) -> Mat {
    let c = at(set, t);
    let r_inv = c.r.inverse().expect("R is invertible");
    let a_t = c.a - c.b * r_inv * c.s;
    let q_t = c.q - c.s.transpose() * r_inv * c.s;
    let kb = *k * c.b;
    let out = *k * a_t + a_t.transpose() * *k + c.c.transpose() * *k * c.c + q_t
        - kb * r_inv * kb.transpose();
    out.symmetrize()
}

/// Periodic solution of the deterministic Riccati ODE, by shooting from
/// the zero terminal value.
pub fn periodic_riccati_ode(set: &PeriodicCoefficientSet, nodes_per_period: usize) -> Result<OdeSolution> {
    require_deterministic(set)?;
    let f = |t: f64, y: &[Mat]| vec![riccati_rhs(set, t, &y[0])];
    let (sweep, residual, iterations) = shoot(&f, vec![Mat::zeros(set.n, set.n)], set.tau, nodes_per_period, 0)?;
    Ok(finish(set.tau, nodes_per_period, sweep, 0, residual, iterations))
}

/// Periodic solution of `K' = −(KA + AᵀK + CᵀKC + Λ)` for deterministic
/// `A`, `C` and source `Λ`.
pub fn periodic_lyapunov_ode<L>(set: &PeriodicCoefficientSet, source: L, nodes_per_period: usize) -> Result<OdeSolution>
where
    L: Fn(f64) -> Mat,
{
    require_deterministic(set)?;
    let f = |t: f64, y: &[Mat]| {
        let c = at(set, t);
        let k = y[0];
        vec![(k * c.a + c.a.transpose() * k + c.c.transpose() * k * c.c + source(t)).symmetrize()]
    };
    let (sweep, residual, iterations) = shoot(&f, vec![Mat::zeros(set.n, set.n)], set.tau, nodes_per_period, 0)?;
    Ok(finish(set.tau, nodes_per_period, sweep, 0, residual, iterations))
}

/// Periodic `η` solving `η' = −((A − BR⁻¹(BᵀK+S))ᵀη + Kb + CᵀKσ + q − (BᵀK+S)ᵀR⁻¹ρ)`.
/// `K` is re-integrated jointly from its converged terminal value so RK4
/// stages see it at the half steps.
pub fn periodic_linear_ode_eta(set: &PeriodicCoefficientSet, k: &OdeSolution, nodes_per_period: usize) -> Result<OdeSolution> {
    require_deterministic(set)?;
    let f = |t: f64, y: &[Mat]| {
        let c = at(set, t);
        let kk = y[0];
        let eta = y[1];
        let r_inv = c.r.inverse().expect("R is invertible");
        let gain = c.b.transpose() * kk + c.s;
        let a_cl = c.a - c.b * r_inv * gain;
        let lam = c.q_lin - gain.transpose() * r_inv * c.rho;
        let d_eta = a_cl.transpose() * eta + kk * c.drift + c.c.transpose() * kk * c.sigma + lam;
        vec![riccati_rhs(set, t, &kk), d_eta]
    };
    let terminal_k = k.values[k.values.len() - 1];
    let (sweep, residual, iterations) = shoot(&f, vec![terminal_k, Mat::zeros(set.n, 1)], set.tau, nodes_per_period, 1)?;
    Ok(finish(set.tau, nodes_per_period, sweep, 1, residual, iterations))
}

fn finish(tau: f64, nodes: usize, sweep: Vec<Vec<Mat>>, component: usize, residual: f64, iterations: usize) -> OdeSolution {
    OdeSolution {
        tau,
        times: (0..=nodes).map(|i| i as f64 * tau / nodes as f64).collect(),
        values: sweep.into_iter().map(|v| v[component]).collect(),
        periodic_residual: residual,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_scenario, CoefficientFn};
    use approx::assert_abs_diff_eq;

    fn scalar_set(a: f64, b: f64, c: f64, q: f64, r: f64) -> PeriodicCoefficientSet {
        PeriodicCoefficientSet::new(
            "s",
            1.0,
            CoefficientFn::scalar(a),
            CoefficientFn::scalar(b),
            CoefficientFn::scalar(q),
            CoefficientFn::scalar(r),
        )
        .unwrap()
        .with_noise(CoefficientFn::scalar(c), CoefficientFn::scalar(1.0))
        .unwrap()
        .with_drift(CoefficientFn::scalar(1.0))
        .unwrap()
    }

    #[test]
    fn explicit_moment_values() {
        assert_abs_diff_eq!(explicit_phi_moment_1d(|_| -1.0, |_| 0.0, 1.0), 0.135335, epsilon = 1e-6);
        assert_abs_diff_eq!(explicit_phi_moment_1d(|_| -1.0, |_| 1.0, 2.0), 0.135335, epsilon = 1e-6);
        assert_abs_diff_eq!(explicit_phi_moment_1d(|_| -0.875, |_| 0.5, 1.0), 0.223130, epsilon = 1e-6);
        // Periodic coefficient: ∫₀¹ 2(−1 + sin 2πs) ds = −2.
        let v = explicit_phi_moment_1d(|s| -1.0 + (2.0 * std::f64::consts::PI * s).sin(), |_| 0.0, 1.0);
        assert_abs_diff_eq!(v, (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn algebraic_riccati_values() {
        assert_abs_diff_eq!(algebraic_riccati_scalar(-1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap(), 2f64.sqrt() - 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(algebraic_riccati_scalar(-1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap(), (5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(algebraic_riccati_scalar(-1.0, 0.0, 0.0, 1.0, 0.0, 1.0).unwrap(), 0.5, epsilon = 1e-15);
        assert!(algebraic_riccati_scalar(1.0, 0.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(algebraic_riccati_scalar(-1.0, 1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        // Root satisfies the reduced equation.
        let (a, b, c, q, s, r) = (-1.0, 1.0, 0.5, 2.0, 0.5, 1.0);
        let k = algebraic_riccati_scalar(a, b, c, q, s, r).unwrap();
        let res = (2.0 * (a - b * s / r) + c * c) * k + (q - s * s / r) - k * k * b * b / r;
        assert!(res.abs() < 1e-12);
    }

    #[test]
    fn constant_riccati_ode_matches_algebraic_root() {
        for (a, b, c) in [(-1.0, 1.0, 0.0), (-1.0, 1.0, 1.0), (-1.0, 0.0, 0.0)] {
            let set = scalar_set(a, b, c, 1.0, 1.0);
            let sol = periodic_riccati_ode(&set, 256).unwrap();
            let k = algebraic_riccati_scalar(a, b, c, 1.0, 0.0, 1.0).unwrap();
            for v in &sol.values {
                assert!((v.get(0, 0) - k).abs() < 1e-9);
            }
            assert!(sol.periodic_residual < 1e-10);
        }
    }

    #[test]
    fn periodic_q_riccati_converges_and_is_step_stable() {
        let mut set = scalar_set(-1.0, 1.0, 0.0, 1.0, 1.0);
        set.q = CoefficientFn::harmonic(1.0, Mat::scalar(1.0), Mat::scalar(0.5), Mat::scalar(0.0), 1).unwrap();
        let coarse = periodic_riccati_ode(&set, 1024).unwrap();
        let fine = periodic_riccati_ode(&set, 2048).unwrap();
        assert!(coarse.periodic_residual < 1e-10);
        for i in 0..=1024 {
            let a = coarse.values[i].get(0, 0);
            let b = fine.values[2 * i].get(0, 0);
            assert!((a - b).abs() < 1e-9 * a.abs(), "{i}: {a} {b}");
        }
        let spread = coarse.values.iter().map(|m| m.get(0, 0)).fold(f64::NEG_INFINITY, f64::max)
            - coarse.values.iter().map(|m| m.get(0, 0)).fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-3);
    }

    #[test]
    fn zero_cost_gives_zero_riccati() {
        let mut set = scalar_set(-1.0, 1.0, 0.0, 1.0, 1.0);
        set.q = CoefficientFn::scalar(0.0);
        let sol = periodic_riccati_ode(&set, 64).unwrap();
        assert!(sol.values.iter().all(|m| m.get(0, 0) == 0.0));
    }

    #[test]
    fn stationary_chain_values() {
        let set = crate::coefficients::builtin_scenario("scalar-constant").unwrap();
        let ch = stationary_chain_scalar(&set).unwrap();
        assert!((ch.k - 0.414214).abs() < 1e-6);
        assert!((ch.eta - 0.292893).abs() < 1e-6);
        assert!((ch.offset + 0.292893).abs() < 1e-6);
        assert!((ch.value - 0.914214).abs() < 1e-6);
        let periodic = crate::coefficients::builtin_scenario("planar-deterministic-periodic").unwrap();
        assert!(stationary_chain_scalar(&periodic).is_err());
    }

    #[test]
    fn lyapunov_scalar() {
        let set = scalar_set(-1.0, 1.0, 0.0, 1.0, 1.0);
        let sol = periodic_lyapunov_ode(&set, |_| Mat::scalar(1.0), 256).unwrap();
        assert_abs_diff_eq!(sol.values[17].get(0, 0), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn eta_chain_scalar() {
        let set = scalar_set(-1.0, 1.0, 0.0, 1.0, 1.0);
        let k = periodic_riccati_ode(&set, 256).unwrap();
        let eta = periodic_linear_ode_eta(&set, &k, 256).unwrap();
        for v in &eta.values {
            assert_abs_diff_eq!(v.get(0, 0), 1.0 - 0.5f64.sqrt(), epsilon = 1e-9);
        }
        let mut zero = set.clone();
        zero.drift = CoefficientFn::scalar(0.0);
        zero.sigma = CoefficientFn::scalar(0.0);
        let eta = periodic_linear_ode_eta(&zero, &k, 64).unwrap();
        assert!(eta.values.iter().all(|m| m.get(0, 0) == 0.0));
    }

    #[test]
    fn planar_oracles_converge() {
        let set = builtin_scenario("planar-deterministic-periodic").unwrap();
        let k = periodic_riccati_ode(&set, DEFAULT_NODES_PER_PERIOD).unwrap();
        assert!(k.periodic_residual < 1e-10);
        assert!(k.max_asymmetry() < 1e-12);
        let eta = periodic_linear_ode_eta(&set, &k, DEFAULT_NODES_PER_PERIOD).unwrap();
        assert!(eta.periodic_residual < 1e-10);
        let lyap = periodic_lyapunov_ode(&set, |_| Mat::identity(2), DEFAULT_NODES_PER_PERIOD).unwrap();
        assert!(lyap.values[0].min_eigenvalue() > 0.0);
    }

    #[test]
    fn random_data_is_rejected() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        assert!(periodic_riccati_ode(&set, 64).is_err());
    }

    #[test]
    fn unstabilizable_data_diverges() {
        let set = scalar_set(1.0, 0.0, 0.0, 1.0, 1.0);
        assert!(matches!(periodic_riccati_ode(&set, 16), Err(Error::ShootingDiverged { .. })));
    }
}
