//! Running cost, burned-in random periodic states and the three ergodic cost
//! estimators: long-horizon average, single period from the burned-in state,
//! and the closed-form value from the Riccati and adjoint BSDEs.

use crate::bsde::{solve_vector_bsde, BsdeGridSolution, FixedPointOptions, RegressionBasis, SampleSet, VectorBsdeData};
use crate::coefficients::{combine_kind, point_at_node, CoeffKind, CoeffSample, CoefficientFn, FeedbackLaw, PathPoint, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::riccati::{solve_stochastic_riccati, stabilizer_check, RiccatiOptions, RiccatiSolution};
use crate::sde::{self, contraction_check, simulate_closed_loop, ContractionReport, InitialState, PathBundle, Recording, StabilityReport};
use crate::stats::{Estimate, Z95};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

/// `⟨Qx,x⟩ + 2⟨Sx,u⟩ + ⟨Ru,u⟩ + 2⟨q,x⟩ + 2⟨ρ,u⟩` at one coefficient sample.
#[inline]
pub fn running_cost(c: &CoeffSample, x: &Mat, u: &Mat) -> f64 {
    c.q.quad_form(x) + 2.0 * u.dot(&(c.s * *x)) + c.r.quad_form(u) + 2.0 * c.q_lin.dot(x) + 2.0 * c.rho.dot(u)
}

/// Checked evaluation of the running cost at `(phase, prefix)`.
pub fn evaluate_running_cost(set: &PeriodicCoefficientSet, x: &Mat, u: &Mat, phase: f64, prefix: &[f64]) -> Result<f64> {
    if x.shape() != (set.n, 1) {
        return Err(Error::ShapeMismatch {
            what: "state".into(),
            expected: (set.n, 1),
            actual: x.shape(),
        });
    }
    if u.shape() != (set.m, 1) {
        return Err(Error::ShapeMismatch {
            what: "control".into(),
            expected: (set.m, 1),
            actual: u.shape(),
        });
    }
    if !(0.0..set.tau).contains(&phase) {
        return Err(Error::PhaseOutOfRange { phase, tau: set.tau });
    }
    Ok(running_cost(&set.sample(&PathPoint::new(phase, prefix)), x, u))
}

/// The running cost along `u = Θx + v` written as `⟨H_a x, x⟩ + ⟨H_b, x⟩ + H_c`.
#[derive(Debug, Clone)]
pub struct ReducedCostForm {
    pub h_a: CoefficientFn,
    pub h_b: CoefficientFn,
    pub h_c: CoefficientFn,
}

impl ReducedCostForm {
    pub fn new(set: &PeriodicCoefficientSet, fb: &FeedbackLaw) -> Result<Self> {
        fb.check_dims(set.n, set.m)?;
        let kind = set
            .coefficients()
            .iter()
            .map(|(_, f)| f.kind())
            .chain([fb.theta.kind(), fb.v.kind()])
            .fold(CoeffKind::Constant, combine_kind);
        let n = set.n;
        let parts = move |set: &PeriodicCoefficientSet, fb: &FeedbackLaw, p: &PathPoint| {
            let c = set.sample(p);
            let th = fb.theta.at(p);
            let v = fb.v.at(p);
            let tt = th.transpose();
            let cross = tt * c.s;
            let h_a = (c.q + cross + cross.transpose() + tt * c.r * th).symmetrize();
            let h_b = (c.s.transpose() * v + tt * (c.r * v) + c.q_lin + tt * c.rho).scale(2.0);
            let h_c = c.r.quad_form(&v) + 2.0 * c.rho.dot(&v);
            (h_a, h_b, h_c)
        };
        let (s1, f1) = (set.clone(), fb.clone());
        let (s2, f2) = (set.clone(), fb.clone());
        let (s3, f3) = (set.clone(), fb.clone());
        let (bq, bs, br, bql, brho) = (set.q.bound(), set.s.bound(), set.r.bound(), set.q_lin.bound(), set.rho.bound());
        let (bt, bv) = (fb.theta.bound(), fb.v.bound());
        let (nf, mf) = (n as f64, set.m as f64);
        Ok(ReducedCostForm {
            h_a: CoefficientFn::custom(kind, n, n, bq + 2.0 * mf * bt * bs + mf * mf * bt * bt * br, move |p| parts(&s1, &f1, p).0),
            h_b: CoefficientFn::custom(kind, n, 1, 2.0 * (mf * bs * bv + mf * mf * bt * br * bv + bql + mf * bt * brho), move |p| {
                parts(&s2, &f2, p).1
            }),
            h_c: CoefficientFn::custom(kind, 1, 1, mf * mf * br * bv * bv + 2.0 * mf * brho * bv + 0.0 * nf, move |p| {
                Mat::scalar(parts(&s3, &f3, p).2)
            }),
        })
    }

    #[inline]
    pub fn eval(&self, p: &PathPoint, x: &Mat) -> f64 {
        self.h_a.at(p).quad_form(x) + self.h_b.at(p).dot(x) + self.h_c.at(p).get(0, 0)
    }
}

/// Which expression of the running cost a simulation integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostRoute {
    Direct,
    Reduced,
}

/// Monte Carlo estimate of a time-averaged cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Averaging window in periods.
    pub periods: usize,
    pub n_paths: usize,
    pub n_overflow: usize,
}

impl CostEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            stderr: self.stderr,
        }
    }

    pub fn ci95(&self) -> [f64; 2] {
        [self.value - Z95 * self.stderr, self.value + Z95 * self.stderr]
    }
}

/// Simulates the closed loop from `x0` over nodes `0..end` of `incs` and
/// returns the trapezoidal integral of the running cost over nodes
/// `from..=end`, together with the final state. `None` on overflow.
#[allow(clippy::too_many_arguments)]
fn integrate_cost(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    form: Option<&ReducedCostForm>,
    x0: Mat,
    incs: &[f64],
    spp: usize,
    dt: f64,
    from: usize,
    end: usize,
) -> Option<(f64, Mat)> {
    let mut acc = [0.0];
    let x = integrate_cost_to(set, fb, form, x0, incs, spp, dt, from, &[end], &mut acc)?;
    Some((acc[0], x))
}

/// Trapezoid integral of the running cost from node `from` to each of the
/// increasing nodes in `marks`, in one pass; returns the state at the last.
#[allow(clippy::too_many_arguments)]
fn integrate_cost_to(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    form: Option<&ReducedCostForm>,
    x0: Mat,
    incs: &[f64],
    spp: usize,
    dt: f64,
    from: usize,
    marks: &[usize],
    out: &mut [f64],
) -> Option<Mat> {
    let end = *marks.last()?;
    let mut x = x0;
    let mut acc = 0.0;
    let mut next = 0;
    let ok = sde::for_each_node(incs, spp, dt, 0, end, |node, p, dw| {
        let c = set.sample(p);
        let u = fb.theta.at(p) * x + fb.v.at(p);
        if node >= from {
            let cost = dt * form.map_or_else(|| running_cost(&c, &x, &u), |f| f.eval(p, &x));
            if node == from {
                acc += 0.5 * cost;
            } else {
                if node == marks[next] {
                    out[next] = acc + 0.5 * cost;
                    next += 1;
                }
                acc += cost;
            }
        }
        let drift = c.a * x + c.b * u + c.drift;
        let diffusion = c.c * x + c.sigma;
        x = x.axpy(dt, &drift).axpy(dw, &diffusion);
        x.max_abs() <= sde::OVERFLOW_LIMIT
    });
    ok.ok()?;
    let p = point_at_node(incs, end, spp, dt);
    let cost = match form {
        Some(f) => f.eval(&p, &x),
        None => running_cost(&set.sample(&p), &x, &(fb.theta.at(&p) * x + fb.v.at(&p))),
    };
    out[next] = acc + 0.5 * dt * cost;
    Some(x)
}

fn check_integer_periods(t: f64, tau: f64) -> Result<usize> {
    let k = t / tau;
    let r = k.round();
    if !(r >= 1.0) || (k - r).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "horizon T = {t} must be a positive integer multiple of the period {tau}"
        )));
    }
    Ok(r as usize)
}

fn cost_from_samples(bundle: &PathBundle, samples: Vec<Option<f64>>, periods: usize) -> Result<CostEstimate> {
    let n_overflow = samples.iter().filter(|s| s.is_none()).count();
    let alive: Vec<f64> = samples.into_iter().flatten().collect();
    if alive.is_empty() {
        return Err(Error::Overflow { path: 0, node: 0 });
    }
    let est = if n_overflow == 0 {
        bundle.estimate(&alive)
    } else {
        Estimate::from_samples(&alive)
    };
    Ok(CostEstimate {
        value: est.value,
        stderr: est.stderr,
        periods,
        n_paths: bundle.n_paths,
        n_overflow,
    })
}

/// `J_T/T` from a fixed initial state; `T` must be a whole number of periods.
pub fn finite_horizon_cost(set: &PeriodicCoefficientSet, fb: &FeedbackLaw, x: &Mat, t: f64, bundle: &PathBundle) -> Result<CostEstimate> {
    Ok(finite_horizon_costs(set, fb, x, &[t], bundle)?.remove(0))
}

/// [`finite_horizon_cost`] at several increasing horizons from one pass
/// over the same paths.
pub fn finite_horizon_costs(set: &PeriodicCoefficientSet, fb: &FeedbackLaw, x: &Mat, horizons: &[f64], bundle: &PathBundle) -> Result<Vec<CostEstimate>> {
    fb.check_dims(set.n, set.m)?;
    check_state(set, x)?;
    let periods = horizons.iter().map(|&t| check_integer_periods(t, set.tau)).collect::<Result<Vec<_>>>()?;
    if periods.is_empty() || periods.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("horizons must be non-empty and increasing".into()));
    }
    let last = *periods.last().unwrap();
    if last > bundle.n_periods {
        return Err(Error::InvalidArgument(format!("horizon of {last} periods exceeds the bundle's {}", bundle.n_periods)));
    }
    let spp = bundle.steps_per_period;
    let dt = bundle.dt();
    let marks: Vec<usize> = periods.iter().map(|k| k * spp).collect();
    let samples = bundle.map_paths(|_, incs| {
        let mut acc = vec![0.0; marks.len()];
        integrate_cost_to(set, fb, None, *x, incs, spp, dt, 0, &marks, &mut acc)?;
        Some(acc.into_iter().zip(horizons).map(|(c, t)| c / t).collect::<Vec<f64>>())
    });
    (0..marks.len())
        .map(|j| cost_from_samples(bundle, samples.iter().map(|s| s.as_ref().map(|v| v[j])).collect(), periods[j]))
        .collect()
}

fn check_state(set: &PeriodicCoefficientSet, x: &Mat) -> Result<()> {
    if x.shape() != (set.n, 1) {
        return Err(Error::ShapeMismatch {
            what: "initial state".into(),
            expected: (set.n, 1),
            actual: x.shape(),
        });
    }
    Ok(())
}

/// Paired comparison of moments at two consecutive period boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityCheck {
    /// Per state entry: mean difference and its standard error.
    pub mean_diff: Vec<[f64; 2]>,
    /// `E|X|²` difference and its standard error.
    pub second_moment_diff: [f64; 2],
    pub passed: bool,
}

/// Phase-0 samples of the burned-in closed-loop state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomPeriodicState {
    pub feedback_id: String,
    pub k_burn: usize,
    pub states: Vec<Mat>,
    pub antithetic: bool,
    pub stationarity: StationarityCheck,
    /// Decay of the difference between starts `x` and `x + e₁`.
    pub contraction: Option<ContractionReport>,
}

impl RandomPeriodicState {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean(&self) -> Mat {
        let mut m = Mat::zeros(self.states[0].rows(), 1);
        for x in &self.states {
            m = m.axpy(1.0 / self.states.len() as f64, x);
        }
        m
    }
}

/// `ceil(20 / (λ̂τ))`, at least 3.
pub fn suggested_k_burn(lambda_hat: f64, tau: f64) -> Result<usize> {
    if !(lambda_hat > 0.0) {
        return Err(Error::NotStabilizing {
            lambda_hat,
            stderr: f64::NAN,
        });
    }
    Ok(((20.0 / (lambda_hat * tau)).ceil() as usize).max(3))
}

const STATIONARITY_FLOOR: f64 = 1e-8;

fn paired_diff(bundle: &PathBundle, d: &[f64], scale: f64) -> ([f64; 2], bool) {
    let e = bundle.estimate(d);
    let ok = e.value.abs() <= 3.0 * e.stderr + STATIONARITY_FLOOR * (1.0 + scale);
    ([e.value, e.stderr], ok)
}

/// Forward burn-in over `k_burn` periods of `bundle` (which needs at least
/// `k_burn + 1`), checking moment stationarity against the next boundary.
pub fn burn_in_state(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    bundle: &PathBundle,
    x_start: &Mat,
    k_burn: usize,
) -> Result<RandomPeriodicState> {
    fb.check_dims(set.n, set.m)?;
    check_state(set, x_start)?;
    if k_burn == 0 {
        return Err(Error::InvalidArgument("k_burn must be at least 1".into()));
    }
    if bundle.n_periods < k_burn + 1 {
        return Err(Error::InvalidArgument(format!(
            "burn-in bundle has {} periods, needs k_burn + 1 = {}",
            bundle.n_periods,
            k_burn + 1
        )));
    }
    let spp = bundle.steps_per_period;
    let rec = Recording::Nodes(vec![k_burn * spp, (k_burn + 1) * spp]);
    let traj = simulate_closed_loop(set, fb, &InitialState::Fixed(*x_start), bundle, &rec)?;
    traj.check_overflow()?;
    let now: Vec<Mat> = (0..traj.n_paths).map(|p| traj.value(p, 0)).collect();
    let next: Vec<Mat> = (0..traj.n_paths).map(|p| traj.value(p, 1)).collect();
    let mut mean_diff = Vec::with_capacity(set.n);
    let mut passed = true;
    for e in 0..set.n {
        let d: Vec<f64> = now.iter().zip(&next).map(|(a, b)| b.flat(e) - a.flat(e)).collect();
        let level = now.iter().map(|a| a.flat(e).abs()).sum::<f64>() / now.len() as f64;
        let (v, ok) = paired_diff(bundle, &d, level);
        mean_diff.push(v);
        passed &= ok;
    }
    let d2: Vec<f64> = now
        .iter()
        .zip(&next)
        .map(|(a, b)| b.frobenius().powi(2) - a.frobenius().powi(2))
        .collect();
    let level = now.iter().map(|a| a.frobenius().powi(2)).sum::<f64>() / now.len() as f64;
    let (second, ok) = paired_diff(bundle, &d2, level);
    passed &= ok;
    if !passed {
        return Err(Error::NotStationary {
            k_burn,
            suggested: 2 * k_burn,
        });
    }
    let contraction = if k_burn + 1 >= 3 {
        let mut x2 = *x_start;
        x2.set(0, 0, x2.get(0, 0) + 1.0);
        Some(contraction_check(set, fb, x_start, &x2, bundle)?)
    } else {
        None
    };
    Ok(RandomPeriodicState {
        feedback_id: fb.id.clone(),
        k_burn,
        states: now,
        antithetic: bundle.antithetic,
        stationarity: StationarityCheck {
            mean_diff,
            second_moment_diff: second,
            passed,
        },
        contraction,
    })
}

fn check_state_for(state: &RandomPeriodicState, fb: &FeedbackLaw, bundle: &PathBundle) -> Result<()> {
    if state.feedback_id != fb.id {
        return Err(Error::FeedbackMismatch {
            state: state.feedback_id.clone(),
            feedback: fb.id.clone(),
        });
    }
    if state.len() != bundle.n_paths {
        return Err(Error::InvalidArgument(format!(
            "{} burned-in states for a bundle of {} paths",
            state.len(),
            bundle.n_paths
        )));
    }
    Ok(())
}

/// Per-path `(1/τ)∫` of the running cost over period `period` of
/// `bundle_fresh`, starting each path from its burned-in state.
pub fn period_cost_samples(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    state: &RandomPeriodicState,
    bundle_fresh: &PathBundle,
    period: usize,
    route: CostRoute,
) -> Result<Vec<Option<f64>>> {
    fb.check_dims(set.n, set.m)?;
    check_state_for(state, fb, bundle_fresh)?;
    if bundle_fresh.n_periods < period + 1 {
        return Err(Error::InvalidArgument(format!(
            "fresh bundle has {} periods, period index {period} requested",
            bundle_fresh.n_periods
        )));
    }
    let form = match route {
        CostRoute::Direct => None,
        CostRoute::Reduced => Some(ReducedCostForm::new(set, fb)?),
    };
    let spp = bundle_fresh.steps_per_period;
    let dt = bundle_fresh.dt();
    let tau = set.tau;
    Ok(bundle_fresh.map_paths(|i, incs| {
        integrate_cost(set, fb, form.as_ref(), state.states[i], incs, spp, dt, period * spp, (period + 1) * spp).map(|(c, _)| c / tau)
    }))
}

/// `(1/τ)E∫₀^τ F dt` from the burned-in state on fresh increments.
pub fn single_period_cost(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    state: &RandomPeriodicState,
    bundle_fresh: &PathBundle,
) -> Result<CostEstimate> {
    let samples = period_cost_samples(set, fb, state, bundle_fresh, 0, CostRoute::Direct)?;
    cost_from_samples(bundle_fresh, samples, 1)
}

/// Single-period cost over period `period` after the burned-in boundary.
pub fn single_period_cost_at(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    state: &RandomPeriodicState,
    bundle_fresh: &PathBundle,
    period: usize,
) -> Result<CostEstimate> {
    let samples = period_cost_samples(set, fb, state, bundle_fresh, period, CostRoute::Direct)?;
    cost_from_samples(bundle_fresh, samples, 1)
}

/// Solves the adjoint BSDE `dη = −((A + BΘ⁰)ᵀη + Cᵀζ + Kb + CᵀKσ + Lσ + q + Θ⁰ᵀρ)dt + ζ dW`.
pub fn solve_adjoint(
    riccati: &RiccatiSolution,
    set: &PeriodicCoefficientSet,
    samples: &SampleSet,
    basis: &RegressionBasis,
    opts: &FixedPointOptions,
) -> Result<BsdeGridSolution> {
    let kind = combine_kind(combine_kind(set.a.kind(), set.b.kind()), riccati.theta.kind());
    let (a, b, th) = (set.a.clone(), set.b.clone(), riccati.theta.clone());
    let n = set.n;
    let mf = set.m as f64;
    let a_cl = CoefficientFn::custom(kind, n, n, set.a.bound() + mf * set.b.bound() * th.bound(), move |p| a.at(p) + b.at(p) * th.at(p));
    let (q, rho, th) = (set.q_lin.clone(), set.rho.clone(), riccati.theta.clone());
    let kind = combine_kind(combine_kind(set.q_lin.kind(), set.rho.kind()), riccati.theta.kind());
    let lambda = CoefficientFn::custom(kind, n, 1, set.q_lin.bound() + mf * th.bound() * set.rho.bound(), move |p| {
        q.at(p) + th.at(p).transpose() * rho.at(p)
    });
    let data = VectorBsdeData {
        a: &a_cl,
        c: &set.c,
        drift: &set.drift,
        sigma: &set.sigma,
        inhomogeneity: &lambda,
    };
    solve_vector_bsde(&data, &riccati.k, samples, basis, opts)
}

/// `−R⁻¹(Bᵀη + ρ)`.
#[inline]
fn offset(c: &CoeffSample, eta: &Mat) -> Mat {
    let rhs = c.b.transpose() * *eta + c.rho;
    c.r.solve(&rhs)
        .map(|x| -x)
        .unwrap_or_else(|| Mat::filled(rhs.rows(), 1, f64::NAN))
}

/// `(Θ⁰, v⁰)` with `v⁰ = −R⁻¹(Bᵀη + ρ)` read from the adjoint solution.
pub fn optimal_feedback(riccati: &RiccatiSolution, eta: &BsdeGridSolution, set: &PeriodicCoefficientSet) -> Result<FeedbackLaw> {
    check_grids(riccati, eta)?;
    if eta.shape != (set.n, 1) {
        return Err(Error::ShapeMismatch {
            what: "adjoint solution".into(),
            expected: (set.n, 1),
            actual: eta.shape,
        });
    }
    let eta = Arc::new(eta.clone());
    let kind = if set.is_deterministic() {
        CoeffKind::DeterministicPeriodic
    } else {
        CoeffKind::PathFunctional
    };
    let s2 = set.clone();
    let e2 = Arc::clone(&eta);
    let eval = move |p: &PathPoint| offset(&s2.sample(p), &e2.value_at_phase(p.phase, p.partial_sum));
    let mut sup: f64 = 0.0;
    for (i, &(lo, hi)) in eta.support.iter().enumerate().take(eta.steps_per_period) {
        for j in 0..=8 {
            let s = lo + (hi - lo) * j as f64 / 8.0;
            sup = sup.max(eval(&PathPoint::with_sum(i as f64 * eta.dt(), &[], s)).max_abs());
        }
    }
    let v = CoefficientFn::custom(kind, set.m, 1, 1.5 * sup, eval);
    Ok(FeedbackLaw::new("optimal", riccati.theta.clone(), v))
}

fn check_grids(riccati: &RiccatiSolution, eta: &BsdeGridSolution) -> Result<()> {
    if riccati.k.steps_per_period != eta.steps_per_period || (riccati.k.tau - eta.tau).abs() > 1e-12 {
        return Err(Error::InvalidArgument("Riccati and adjoint solutions use different grids".into()));
    }
    Ok(())
}

/// Closed-form value with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// `sqrt(mc_stderr² + solver_bound²)`.
    pub stderr: f64,
    pub mc_stderr: f64,
    /// First-order effect of the fixed-point stopping errors of `K` and `η`.
    pub solver_bound: f64,
}

impl ValueEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.value,
            stderr: self.stderr,
        }
    }
}

/// Integrand of the value at node `node` (`spp` is the next phase 0).
#[inline]
fn value_integrand(riccati: &RiccatiSolution, eta: &BsdeGridSolution, c: &CoeffSample, node: usize, s: f64) -> f64 {
    let spp = eta.steps_per_period;
    let (k, e, z) = if node == spp {
        (riccati.k.value(spp, 0.0), eta.value(spp, 0.0), eta.integrand_value(0, 0.0))
    } else {
        (riccati.k.value(node, s), eta.value(node, s), eta.integrand_value(node, s))
    };
    let w = c.b.transpose() * e + c.rho;
    let rw = c.r.solve(&w).unwrap_or_else(|| Mat::filled(w.rows(), 1, f64::NAN));
    -rw.dot(&w) + k.quad_form(&c.sigma) + 2.0 * e.dot(&c.drift) + 2.0 * z.dot(&c.sigma)
}

fn last_update(sol: &BsdeGridSolution) -> f64 {
    sol.trace.last().map_or(0.0, |s| s.update_norm)
}

/// `V = (1/τ)E∫₀^τ(−⟨R⁻¹(Bᵀη+ρ), Bᵀη+ρ⟩ + ⟨Kσ,σ⟩ + 2⟨η,b⟩ + 2⟨ζ,σ⟩)dt` by
/// trapezoidal node quadrature along the paths of `bundle`.
pub fn value_function(riccati: &RiccatiSolution, eta: &BsdeGridSolution, set: &PeriodicCoefficientSet, bundle: &PathBundle) -> Result<ValueEstimate> {
    check_grids(riccati, eta)?;
    if bundle.steps_per_period != eta.steps_per_period {
        return Err(Error::InvalidArgument("bundle grid differs from the solution grid".into()));
    }
    let spp = bundle.steps_per_period;
    let dt = bundle.dt();
    let tau = set.tau;
    let per_path = bundle.map_paths(|_, incs| {
        let mut acc = 0.0;
        let _ = sde::for_each_node(incs, spp, dt, 0, spp, |node, p, _| {
            let w = if node == 0 { 0.5 } else { 1.0 };
            acc += w * dt * value_integrand(riccati, eta, &set.sample(p), node, p.partial_sum);
            true
        });
        let p = point_at_node(incs, spp, spp, dt);
        acc += 0.5 * dt * value_integrand(riccati, eta, &set.sample(&p), spp, 0.0);
        acc / tau
    });
    let est = bundle.estimate(&per_path);
    let n = set.n as f64;
    let m = set.m as f64;
    let sigma2 = n * set.sigma.bound().powi(2);
    let eta_sup = eta.node_means.iter().map(|e| e.max_abs()).fold(0.0, f64::max) * n;
    let r_inv = set.r.constant_value().and_then(|r| r.inverse()).map_or(1.0 / positivity_margin(set), |ri| ri.max_abs() * m);
    let b_norm = set.b.bound() * n.max(m);
    let w_sup = b_norm * eta_sup + m * set.rho.bound();
    let d_eta = last_update(eta);
    let d_k = riccati.trace.last().map_or(0.0, |s| s.update_norm.min(last_update(&riccati.k).max(s.update_norm)));
    let solver_bound = sigma2 * d_k + 2.0 * (n * set.drift.bound() + 2.0 * r_inv * w_sup * b_norm) * d_eta;
    Ok(ValueEstimate {
        value: est.value,
        stderr: (est.stderr.powi(2) + solver_bound.powi(2)).sqrt(),
        mc_stderr: est.stderr,
        solver_bound,
    })
}

fn positivity_margin(set: &PeriodicCoefficientSet) -> f64 {
    crate::coefficients::check_positivity(set, 64, 1)
        .map(|r| r.margin_r)
        .unwrap_or(f64::NAN)
        .max(1e-12)
}

/// Both sides of the completion-of-square identity on shared paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub feedback_id: String,
    /// Single-period cost of the feedback.
    pub lhs: Estimate,
    /// Value integrand averaged along the same paths.
    pub value: Estimate,
    /// `(1/τ)E∫⟨R Δu, Δu⟩` with `Δu = (Θ − Θ⁰)X + v − v⁰`.
    pub quadratic: Estimate,
    pub rhs: f64,
    /// `lhs − rhs` estimated pathwise.
    pub difference: Estimate,
    pub min_pathwise_quadratic: f64,
    pub quadratic_nonnegative: bool,
}

impl CompletionReport {
    pub fn balanced(&self, k: f64) -> bool {
        self.difference.within(0.0, k)
    }
}

/// Evaluates the completion-of-square identity for `fb` against the optimal
/// law `(riccati, eta)` on one fresh period from `state`.
pub fn completion_of_square_check(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    riccati: &RiccatiSolution,
    eta: &BsdeGridSolution,
    state: &RandomPeriodicState,
    bundle_fresh: &PathBundle,
) -> Result<CompletionReport> {
    fb.check_dims(set.n, set.m)?;
    check_grids(riccati, eta)?;
    check_state_for(state, fb, bundle_fresh)?;
    if bundle_fresh.steps_per_period != eta.steps_per_period {
        return Err(Error::InvalidArgument("fresh bundle grid differs from the solution grid".into()));
    }
    let opt = optimal_feedback(riccati, eta, set)?;
    let spp = bundle_fresh.steps_per_period;
    let dt = bundle_fresh.dt();
    let tau = set.tau;
    let per_path: Vec<Option<(f64, f64, f64, f64)>> = bundle_fresh.map_paths(|i, incs| {
        let mut x = state.states[i];
        let (mut lhs, mut val, mut quad) = (0.0, 0.0, 0.0);
        let mut min_q = f64::INFINITY;
        let mut terms = |p: &PathPoint, c: &CoeffSample, x: &Mat, node: usize, w: f64| {
            let u = fb.theta.at(p) * *x + fb.v.at(p);
            let u0 = opt.theta.at(p) * *x + opt.v.at(p);
            let du = u - u0;
            let qv = c.r.quad_form(&du);
            min_q = min_q.min(qv);
            lhs += w * dt * running_cost(c, x, &u);
            val += w * dt * value_integrand(riccati, eta, c, node, p.partial_sum);
            quad += w * dt * qv;
            u
        };
        let ok = sde::for_each_node(incs, spp, dt, 0, spp, |node, p, dw| {
            let c = set.sample(p);
            let w = if node == 0 { 0.5 } else { 1.0 };
            let u = terms(p, &c, &x, node, w);
            let drift = c.a * x + c.b * u + c.drift;
            let diffusion = c.c * x + c.sigma;
            x = x.axpy(dt, &drift).axpy(dw, &diffusion);
            x.max_abs() <= sde::OVERFLOW_LIMIT
        });
        ok.ok()?;
        let p = point_at_node(incs, spp, spp, dt);
        let c = set.sample(&p);
        terms(&p, &c, &x, spp, 0.5);
        Some((lhs / tau, val / tau, quad / tau, min_q))
    });
    if per_path.iter().any(|p| p.is_none()) {
        return Err(Error::Overflow { path: per_path.iter().position(|p| p.is_none()).unwrap_or(0), node: spp });
    }
    let rows: Vec<(f64, f64, f64, f64)> = per_path.into_iter().flatten().collect();
    let col = |f: fn(&(f64, f64, f64, f64)) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let lhs = bundle_fresh.estimate(&col(|r| r.0));
    let value = bundle_fresh.estimate(&col(|r| r.1));
    let quadratic = bundle_fresh.estimate(&col(|r| r.2));
    let difference = bundle_fresh.estimate(&col(|r| r.0 - r.1 - r.2));
    let min_q = rows.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    Ok(CompletionReport {
        feedback_id: fb.id.clone(),
        lhs,
        value,
        quadratic,
        rhs: value.value + quadratic.value,
        difference,
        min_pathwise_quadratic: min_q,
        quadratic_nonnegative: min_q >= 0.0,
    })
}

/// A direction `(ΔΘ, Δv)` scaled by `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub d_theta: Mat,
    pub d_v: Mat,
    pub epsilon: f64,
}

/// Bundles and burn-in length shared by every scanned feedback.
#[derive(Debug, Clone)]
pub struct ScanSetup {
    pub burn: PathBundle,
    pub fresh: PathBundle,
    pub stability: PathBundle,
    pub x_start: Mat,
    pub k_burn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub epsilon: f64,
    pub cost: f64,
    pub stderr: f64,
    pub stable: bool,
    pub lambda_hat: f64,
    /// `cost(ε) − cost(0)` on common random numbers, with its error.
    pub excess: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    /// Epsilon of the smallest point estimate among stable rows.
    pub argmin_epsilon: Option<f64>,
    /// Every excess is above `−3·stderr`.
    pub min_at_zero_within_ci: bool,
    /// Least-squares `κ` in `cost(ε) − cost(0) ≈ κε²`.
    pub kappa: Option<Estimate>,
    pub kappa_ci95: Option<[f64; 2]>,
}

impl ScanTable {
    /// Columns `epsilon,cost,stderr,stable_flag`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epsilon,cost,stderr,stable_flag")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.epsilon, r.cost, r.stderr, u8::from(r.stable))?;
        }
        Ok(())
    }

    pub fn kappa_positive(&self) -> bool {
        self.kappa_ci95.is_some_and(|ci| ci[0] > 0.0)
    }
}

/// Single-period costs of `Θ⁰ + εΔΘ, v⁰ + εΔv` for every perturbation. All
/// feedbacks are burned in and evaluated on the same increments, so cost
/// differences are estimated pathwise. Unstable feedbacks are recorded with
/// a NaN cost.
pub fn optimality_scan(
    set: &PeriodicCoefficientSet,
    riccati: &RiccatiSolution,
    eta: &BsdeGridSolution,
    perturbations: &[Perturbation],
    setup: &ScanSetup,
) -> Result<ScanTable> {
    let opt = optimal_feedback(riccati, eta, set)?;
    let mut samples: Vec<Option<Vec<f64>>> = Vec::with_capacity(perturbations.len());
    let mut rows = Vec::with_capacity(perturbations.len());
    for (idx, pert) in perturbations.iter().enumerate() {
        let mut fb = opt.perturbed(&pert.d_theta, &pert.d_v, pert.epsilon)?;
        fb.id = format!("scan-{idx}");
        let rep = stabilizer_check(&fb.theta, set, &setup.stability)?;
        let costs = if rep.stable {
            match burn_in_state(set, &fb, &setup.burn, &setup.x_start, setup.k_burn) {
                Ok(state) => {
                    let c = period_cost_samples(set, &fb, &state, &setup.fresh, 0, CostRoute::Direct)?;
                    if c.iter().all(|x| x.is_some()) {
                        Some(c.into_iter().flatten().collect::<Vec<f64>>())
                    } else {
                        None
                    }
                }
                Err(Error::Overflow { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let (cost, se) = match &costs {
            Some(c) => {
                let e = setup.fresh.estimate(c);
                (e.value, e.stderr)
            }
            None => (f64::NAN, f64::NAN),
        };
        rows.push(ScanRow {
            epsilon: pert.epsilon,
            cost,
            stderr: se,
            stable: costs.is_some(),
            lambda_hat: rep.lambda_hat,
            excess: None,
        });
        samples.push(costs);
    }
    let zero = perturbations.iter().position(|p| p.epsilon == 0.0);
    let mut kappa = None;
    let mut kappa_ci95 = None;
    let mut within = true;
    if let Some(z) = zero.and_then(|z| samples[z].as_ref().map(|c| (z, c))) {
        let (z, base) = (z.0, z.1.clone());
        for (i, row) in rows.iter_mut().enumerate() {
            if i == z {
                row.excess = Some([0.0, 0.0]);
                continue;
            }
            if let Some(c) = &samples[i] {
                let d: Vec<f64> = c.iter().zip(&base).map(|(a, b)| a - b).collect();
                let e = setup.fresh.estimate(&d);
                row.excess = Some([e.value, e.stderr]);
                within &= e.value >= -3.0 * e.stderr;
            }
        }
        let used: Vec<usize> = (0..rows.len()).filter(|&i| i != z && samples[i].is_some()).collect();
        let denom: f64 = used.iter().map(|&i| rows[i].epsilon.powi(4)).sum();
        if denom > 0.0 {
            let per_path: Vec<f64> = (0..base.len())
                .map(|p| {
                    used.iter()
                        .map(|&i| rows[i].epsilon.powi(2) * (samples[i].as_ref().expect("stable row")[p] - base[p]))
                        .sum::<f64>()
                        / denom
                })
                .collect();
            let k = setup.fresh.estimate(&per_path);
            kappa_ci95 = Some([k.value - Z95 * k.stderr, k.value + Z95 * k.stderr]);
            kappa = Some(k);
        }
    } else {
        within = false;
    }
    let argmin = rows
        .iter()
        .filter(|r| r.stable)
        .min_by(|a, b| a.cost.total_cmp(&b.cost))
        .map(|r| r.epsilon);
    Ok(ScanTable {
        rows,
        argmin_epsilon: argmin,
        min_at_zero_within_ci: within,
        kappa,
        kappa_ci95,
    })
}

/// `{−0.2, −0.1, 0, 0.1, 0.2}` along `ΔΘ = 1` (all entries), `Δv = 0`.
pub fn default_perturbations(n: usize, m: usize) -> Vec<Perturbation> {
    [-0.2, -0.1, 0.0, 0.1, 0.2]
        .into_iter()
        .map(|epsilon| Perturbation {
            d_theta: Mat::filled(m, n, 1.0),
            d_v: Mat::zeros(m, 1),
            epsilon,
        })
        .collect()
}

/// Pairwise comparison of two estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub first: String,
    pub second: String,
    pub difference: f64,
    pub combined_stderr: f64,
    pub within_3se: bool,
}

impl Agreement {
    pub fn new(first: &str, a: Estimate, second: &str, b: Estimate) -> Self {
        let diff = a.value - b.value;
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        Agreement {
            first: first.into(),
            second: second.into(),
            difference: diff,
            combined_stderr: se,
            within_3se: Estimate { value: diff, stderr: se }.within(0.0, 3.0),
        }
    }
}

/// Sizes of the Riccati and adjoint solves behind the optimal feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    pub seed: u64,
    pub steps_per_period: usize,
    /// Regression samples (one period each).
    pub samples: usize,
    pub stability_paths: usize,
    pub stability_periods: usize,
    /// Outer Riccati tolerance; the adjoint fixed point uses the same value.
    pub tol: f64,
    /// Regression basis; [`default_basis`] of the scenario when absent.
    pub basis: Option<RegressionBasis>,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions {
            seed: 0,
            steps_per_period: 64,
            samples: 4000,
            stability_paths: 2000,
            stability_periods: 10,
            tol: 1e-6,
            basis: None,
        }
    }
}

/// Degree 2 for deterministic data. Path-functional data use degree 4: a
/// quadratic in the displacement cannot follow the odd part of a saturating
/// dependence and leaves a systematic defect in the cost identities.
pub fn default_basis(set: &PeriodicCoefficientSet) -> RegressionBasis {
    if set.is_deterministic() {
        RegressionBasis::default()
    } else {
        RegressionBasis { degree: 4, ..RegressionBasis::default() }
    }
}

/// Riccati solution, adjoint solution and the feedback built from them.
#[derive(Debug, Clone)]
pub struct OptimalChain {
    pub riccati: RiccatiSolution,
    pub eta: BsdeGridSolution,
    pub feedback: FeedbackLaw,
    pub samples: Arc<SampleSet>,
}

/// Solves the Riccati and adjoint equations on one sample set.
pub fn solve_optimal_chain(set: &PeriodicCoefficientSet, opts: &ChainOptions) -> Result<OptimalChain> {
    let tau = set.tau;
    let bundle = PathBundle::new(tau, opts.steps_per_period, 1, opts.samples, sde::derive_seed(opts.seed, "regression"))?;
    let samples = Arc::new(SampleSet::from_bundle(&bundle));
    let stability = PathBundle::new(
        tau,
        opts.steps_per_period,
        opts.stability_periods,
        opts.stability_paths,
        sde::derive_seed(opts.seed, "stability"),
    )?;
    let ric_opts = RiccatiOptions {
        tol: opts.tol,
        basis: opts.basis.unwrap_or_else(|| default_basis(set)),
        ..RiccatiOptions::default()
    };
    let riccati = solve_stochastic_riccati(set, set.stabilizer.as_ref(), &samples, &stability, &ric_opts)?;
    let fp = FixedPointOptions {
        tol: opts.tol,
        ..FixedPointOptions::default()
    };
    let eta = solve_adjoint(&riccati, set, &samples, &ric_opts.basis, &fp)?;
    let feedback = optimal_feedback(&riccati, &eta, set)?;
    Ok(OptimalChain {
        riccati,
        eta,
        feedback,
        samples,
    })
}

impl OptimalChain {
    /// Closed-form value along `paths` fresh one-period paths.
    pub fn value(&self, set: &PeriodicCoefficientSet, paths: usize, seed: u64) -> Result<ValueEstimate> {
        let bundle = PathBundle::new(set.tau, self.eta.steps_per_period, 1, paths, sde::derive_seed(seed, "value"))?;
        value_function(&self.riccati, &self.eta, set, &bundle)
    }
}

/// Sizes and seeds of an ergodic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicOptions {
    pub n_paths: usize,
    pub steps_per_period: usize,
    pub seed: u64,
    /// Long horizon in periods.
    pub horizon_periods: usize,
    /// Shorter horizon reported for the convergence-in-T check.
    pub short_horizon_periods: Option<usize>,
    /// Burn-in length; derived from the decay rate when absent.
    pub k_burn: Option<usize>,
    pub x_start: Option<Vec<f64>>,
    pub antithetic: bool,
    pub stability_paths: usize,
    pub stability_periods: usize,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions {
            n_paths: 10_000,
            steps_per_period: 64,
            seed: 0,
            horizon_periods: 50,
            short_horizon_periods: Some(10),
            k_burn: None,
            x_start: None,
            antithetic: false,
            stability_paths: 2000,
            stability_periods: 10,
        }
    }
}

impl ErgodicOptions {
    pub fn stability_bundle(&self, tau: f64) -> Result<PathBundle> {
        PathBundle::new(tau, self.steps_per_period, self.stability_periods, self.stability_paths, sde::derive_seed(self.seed, "stability"))
    }

    fn bundle(&self, tau: f64, periods: usize, label: &str) -> Result<PathBundle> {
        Ok(PathBundle::new(tau, self.steps_per_period, periods, self.n_paths, sde::derive_seed(self.seed, label))?.with_antithetic(self.antithetic))
    }

    pub fn start_state(&self, n: usize) -> Result<Mat> {
        match &self.x_start {
            None => Ok(Mat::zeros(n, 1)),
            Some(v) if v.len() == n => Ok(Mat::column(v)),
            Some(v) => Err(Error::ShapeMismatch {
                what: "x_start".into(),
                expected: (n, 1),
                actual: (v.len(), 1),
            }),
        }
    }
}

/// The three ergodic cost estimates for one feedback.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErgodicReport {
    pub schema: String,
    pub scenario: String,
    pub feedback_id: String,
    pub options: ErgodicOptions,
    pub stability: StabilityReport,
    pub k_burn: usize,
    pub stationarity: StationarityCheck,
    pub contraction: Option<ContractionReport>,
    pub cost_longrun: CostEstimate,
    pub cost_short_horizon: Option<CostEstimate>,
    pub cost_single_period: CostEstimate,
    pub value_v: Option<ValueEstimate>,
    pub agreements: Vec<Agreement>,
    /// Disagreements beyond three combined standard errors.
    pub flags: Vec<String>,
}

/// Estimates the long-run, short-horizon and single-period costs of `fb`,
/// and compares them with `value` when given.
pub fn ergodic_report(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    value: Option<ValueEstimate>,
    opts: &ErgodicOptions,
) -> Result<ErgodicReport> {
    fb.check_dims(set.n, set.m)?;
    let tau = set.tau;
    let stability = stabilizer_check(&fb.theta, set, &opts.stability_bundle(tau)?)?;
    if !stability.stable {
        return Err(Error::NotStabilizing {
            lambda_hat: stability.lambda_hat,
            stderr: stability.lambda_stderr,
        });
    }
    let k_burn = match opts.k_burn {
        Some(k) => k,
        None => suggested_k_burn(stability.lambda_hat, tau)?,
    };
    let x0 = opts.start_state(set.n)?;
    let burn = opts.bundle(tau, k_burn + 1, "burn-in")?;
    let state = burn_in_state(set, fb, &burn, &x0, k_burn)?;
    let fresh = opts.bundle(tau, 1, "single-period")?;
    let single = single_period_cost(set, fb, &state, &fresh)?;
    let long_bundle = opts.bundle(tau, opts.horizon_periods, "long-run")?;
    let long_t = opts.horizon_periods as f64 * tau;
    let (longrun, short) = match opts.short_horizon_periods {
        Some(p) if p < opts.horizon_periods => {
            let mut c = finite_horizon_costs(set, fb, &x0, &[p as f64 * tau, long_t], &long_bundle)?;
            let long = c.pop().unwrap();
            (long, c.pop())
        }
        Some(p) if p == opts.horizon_periods => {
            let long = finite_horizon_cost(set, fb, &x0, long_t, &long_bundle)?;
            (long, Some(long))
        }
        _ => (finite_horizon_cost(set, fb, &x0, long_t, &long_bundle)?, None),
    };
    let mut agreements = vec![Agreement::new("long-run", longrun.estimate(), "single-period", single.estimate())];
    if let Some(v) = value {
        agreements.push(Agreement::new("value", v.estimate(), "single-period", single.estimate()));
        agreements.push(Agreement::new("value", v.estimate(), "long-run", longrun.estimate()));
    }
    let flags = agreements
        .iter()
        .filter(|a| !a.within_3se)
        .map(|a| format!("{} and {} differ by {:.4e} (combined SE {:.4e})", a.first, a.second, a.difference, a.combined_stderr))
        .collect();
    Ok(ErgodicReport {
        schema: "ergolq.ergodic/1".into(),
        scenario: set.name.clone(),
        feedback_id: fb.id.clone(),
        options: opts.clone(),
        stability,
        k_burn,
        stationarity: state.stationarity.clone(),
        contraction: state.contraction.clone(),
        cost_longrun: longrun,
        cost_short_horizon: short,
        cost_single_period: single,
        value_v: value,
        agreements,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::builtin_scenario;

    fn scalar(a: f64, b: f64, c: f64, sigma: f64, drift: f64) -> PeriodicCoefficientSet {
        let f = CoefficientFn::scalar;
        PeriodicCoefficientSet::new("s", 1.0, f(a), f(b), f(1.0), f(1.0))
            .unwrap()
            .with_noise(f(c), f(sigma))
            .unwrap()
            .with_drift(f(drift))
            .unwrap()
    }

    fn bundle(periods: usize, paths: usize, seed: u64) -> PathBundle {
        PathBundle::new(1.0, 64, periods, paths, seed).unwrap()
    }

    fn one_period_samples(n: usize, seed: u64) -> SampleSet {
        SampleSet::from_bundle(&bundle(1, n, seed))
    }

    fn optimal(set: &PeriodicCoefficientSet, n: usize) -> (RiccatiSolution, BsdeGridSolution, FeedbackLaw) {
        let s = one_period_samples(n, 5);
        let ric = solve_stochastic_riccati(set, None, &s, &bundle(10, 1000, 6), &RiccatiOptions::default()).unwrap();
        let eta = solve_adjoint(&ric, set, &s, &RegressionBasis::default(), &FixedPointOptions::default()).unwrap();
        let fb = optimal_feedback(&ric, &eta, set).unwrap();
        (ric, eta, fb)
    }

    #[test]
    fn running_cost_examples() {
        let set = scalar(-1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(evaluate_running_cost(&set, &Mat::scalar(0.0), &Mat::scalar(0.0), 0.1, &[]).unwrap(), 0.0);
        assert_eq!(evaluate_running_cost(&set, &Mat::scalar(2.0), &Mat::scalar(1.0), 0.1, &[]).unwrap(), 5.0);
        assert!(evaluate_running_cost(&set, &Mat::zeros(2, 1), &Mat::scalar(1.0), 0.1, &[]).is_err());
        assert!(evaluate_running_cost(&set, &Mat::scalar(1.0), &Mat::scalar(1.0), 1.0, &[]).is_err());
    }

    #[test]
    fn reduced_form_matches_direct_cost() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        for name in ["scalar-cross-term", "planar-deterministic-periodic", "scalar-random-periodic"] {
            let set = builtin_scenario(name).unwrap();
            let theta = CoefficientFn::tanh_of_increments(Mat::filled(set.m, set.n, -0.3), Mat::filled(set.m, set.n, 0.2), 1.0).unwrap();
            let fb = FeedbackLaw::new("t", theta, CoefficientFn::constant(Mat::filled(set.m, 1, 0.4)));
            let form = ReducedCostForm::new(&set, &fb).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
            for _ in 0..100 {
                let phase = z().abs().fract();
                let prefix = [z() * 0.3, z() * 0.3];
                let p = PathPoint::new(phase, &prefix);
                let x = Mat::column(&(0..set.n).map(|_| 2.0 * z()).collect::<Vec<_>>());
                let u = fb.theta.at(&p) * x + fb.v.at(&p);
                let direct = evaluate_running_cost(&set, &x, &u, phase, &prefix).unwrap();
                assert!((form.eval(&p, &x) - direct).abs() < 1e-10, "{name}");
            }
        }
    }

    #[test]
    fn zero_noise_burn_in_collapses() {
        let set = scalar(-1.0, 1.0, 0.0, 0.0, 0.0);
        let fb = FeedbackLaw::zero(1, 1);
        let st = burn_in_state(&set, &fb, &bundle(21, 50, 1), &Mat::scalar(1.0), 20).unwrap();
        assert!(st.states.iter().all(|x| x.get(0, 0).abs() < 1e-3));
        let rep = st.contraction.unwrap();
        assert!(rep.contracting && rep.slope_per_period.unwrap() < 0.0);
    }

    #[test]
    fn stationary_variance() {
        let set = scalar(-1.0, 0.0, 0.0, 1.0, 0.0);
        let fb = FeedbackLaw::zero(1, 1);
        let st = burn_in_state(&set, &fb, &bundle(11, 20_000, 2), &Mat::scalar(0.0), 10).unwrap();
        let xs: Vec<f64> = st.states.iter().map(|x| x.get(0, 0).powi(2)).collect();
        let e = Estimate::from_samples(&xs);
        // Euler–Maruyama stationary variance σ²/(2|a| − a²dt).
        let dt = 1.0 / 64.0;
        let em = 1.0 / (2.0 - dt);
        assert!(e.within(em, 3.0), "{e:?}");
        assert!((em - 0.5).abs() < 0.01);
        assert!(st.stationarity.passed);
    }

    #[test]
    fn too_short_burn_in_is_detected() {
        let set = scalar(-0.05, 0.0, 0.0, 0.1, 1.0);
        let fb = FeedbackLaw::zero(1, 1);
        let err = burn_in_state(&set, &fb, &bundle(3, 500, 3), &Mat::scalar(0.0), 2);
        assert!(matches!(err, Err(Error::NotStationary { suggested: 4, .. })), "{err:?}");
    }

    #[test]
    fn one_pass_horizons_match_separate_runs() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let fb = FeedbackLaw::new("p", set.stabilizer.clone().unwrap(), CoefficientFn::zeros(1, 1));
        let b = bundle(5, 200, 4);
        let x = Mat::scalar(0.7);
        let both = finite_horizon_costs(&set, &fb, &x, &[2.0, 5.0], &b).unwrap();
        for (t, c) in [(2.0, both[0]), (5.0, both[1])] {
            let alone = finite_horizon_cost(&set, &fb, &x, t, &b).unwrap();
            assert!((alone.value - c.value).abs() < 1e-12 * alone.value.abs(), "T={t}");
            assert_eq!(c.periods, t as usize);
        }
        assert!(finite_horizon_costs(&set, &fb, &x, &[5.0, 2.0], &b).is_err());
        assert!(finite_horizon_costs(&set, &fb, &x, &[6.0], &b).is_err());
    }

    #[test]
    fn zero_cost_data_costs_nothing() {
        let f = CoefficientFn::scalar;
        let set = PeriodicCoefficientSet::new("z", 1.0, f(-1.0), f(1.0), f(0.0), f(1.0))
            .unwrap()
            .with_noise(f(0.2), f(1.0))
            .unwrap();
        let fb = FeedbackLaw::zero(1, 1);
        let c = finite_horizon_cost(&set, &fb, &Mat::scalar(1.0), 3.0, &bundle(3, 100, 1)).unwrap();
        assert_eq!((c.value, c.stderr), (0.0, 0.0));
        assert!(finite_horizon_cost(&set, &fb, &Mat::scalar(1.0), 2.5, &bundle(3, 100, 1)).is_err());
        let st = burn_in_state(&set, &fb, &bundle(6, 100, 2), &Mat::scalar(0.0), 5).unwrap();
        let c = single_period_cost(&set, &fb, &st, &bundle(1, 100, 3)).unwrap();
        assert_eq!(c.value, 0.0);
        let other = FeedbackLaw::constant_gain("other", Mat::scalar(-1.0));
        assert!(matches!(single_period_cost(&set, &other, &st, &bundle(1, 100, 3)), Err(Error::FeedbackMismatch { .. })));
    }

    #[test]
    fn scalar_chain_feedback_and_value() {
        let set = scalar(-1.0, 1.0, 0.0, 1.0, 1.0);
        let (ric, eta, fb) = optimal(&set, 64);
        let k = 2f64.sqrt() - 1.0;
        let eta_ref = k / 2f64.sqrt();
        let p = PathPoint::deterministic(0.4);
        assert!((fb.theta.at(&p).get(0, 0) + k).abs() < 1e-5);
        assert!((eta.fixed_point.get(0, 0) - eta_ref).abs() < 1e-5);
        assert!((fb.v.at(&p).get(0, 0) + eta_ref).abs() < 1e-5);
        let v = value_function(&ric, &eta, &set, &bundle(1, 16, 1)).unwrap();
        let v_ref = -eta_ref * eta_ref + k + 2.0 * eta_ref;
        assert!((v_ref - 0.914214).abs() < 1e-6);
        assert!((v.value - v_ref).abs() <= 3.0 * v.stderr + 1e-9, "{v:?}");
        assert!(v.stderr < 1e-4);

        // Without inhomogeneous drift η vanishes and V = Kσ².
        let set0 = scalar(-1.0, 1.0, 0.0, 1.0, 0.0);
        let (ric0, eta0, fb0) = optimal(&set0, 64);
        assert!(eta0.fixed_point.max_abs() < 1e-9);
        assert!(fb0.v.at(&p).max_abs() < 1e-9);
        let v0 = value_function(&ric0, &eta0, &set0, &bundle(1, 16, 1)).unwrap();
        assert!((v0.value - k).abs() < 1e-5);
    }

    #[test]
    fn assembly_of_offset() {
        let f = CoefficientFn::scalar;
        let set = PeriodicCoefficientSet::new("o", 1.0, f(-1.0), f(1.0), f(1.0), f(2.0))
            .unwrap()
            .with_cross_and_linear(f(0.0), f(0.0), f(0.5))
            .unwrap();
        let c = set.sample(&PathPoint::deterministic(0.0));
        assert!((offset(&c, &Mat::scalar(1.0)).get(0, 0) + 0.75).abs() < 1e-15);
    }

    #[test]
    fn estimators_agree_on_scalar_constant() {
        let set = builtin_scenario("scalar-constant").unwrap();
        let (ric, eta, fb) = optimal(&set, 64);
        let v = value_function(&ric, &eta, &set, &bundle(1, 16, 1)).unwrap();
        let opts = ErgodicOptions {
            n_paths: 4000,
            seed: 17,
            ..ErgodicOptions::default()
        };
        let rep = ergodic_report(&set, &fb, Some(v), &opts).unwrap();
        assert!(rep.flags.is_empty(), "{:#?}", rep.agreements);
        assert!(rep.stationarity.passed);
        let state = burn_in_state(&set, &fb, &opts.bundle(1.0, rep.k_burn + 1, "burn-in").unwrap(), &Mat::scalar(0.0), rep.k_burn).unwrap();
        let fresh = bundle(2, 4000, 99);
        let c0 = single_period_cost_at(&set, &fb, &state, &fresh, 0).unwrap();
        let c1 = single_period_cost_at(&set, &fb, &state, &fresh, 1).unwrap();
        assert!(Agreement::new("0", c0.estimate(), "1", c1.estimate()).within_3se);
    }

    #[test]
    fn reduced_route_is_identical_on_same_paths() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let theta = CoefficientFn::scalar(-0.5);
        let fb = FeedbackLaw::new("g", theta, CoefficientFn::scalar(-0.2));
        let st = burn_in_state(&set, &fb, &bundle(9, 300, 1), &Mat::scalar(0.0), 8).unwrap();
        let fresh = bundle(1, 300, 2);
        let a = period_cost_samples(&set, &fb, &st, &fresh, 0, CostRoute::Direct).unwrap();
        let b = period_cost_samples(&set, &fb, &st, &fresh, 0, CostRoute::Reduced).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn completion_of_square_at_and_off_optimum() {
        let set = scalar(-1.0, 1.0, 0.0, 1.0, 1.0);
        let (ric, eta, fb) = optimal(&set, 64);
        let n = 8000;
        let st = burn_in_state(&set, &fb, &bundle(9, n, 1), &Mat::scalar(0.0), 8).unwrap();
        let rep = completion_of_square_check(&set, &fb, &ric, &eta, &st, &bundle(1, n, 2)).unwrap();
        assert!(rep.quadratic.value.abs() < 1e-9);
        assert!(rep.balanced(3.0), "{rep:?}");
        let pert = fb.perturbed(&Mat::scalar(1.0), &Mat::scalar(0.0), 0.2).unwrap();
        let st = burn_in_state(&set, &pert, &bundle(9, n, 1), &Mat::scalar(0.0), 8).unwrap();
        let rep = completion_of_square_check(&set, &pert, &ric, &eta, &st, &bundle(1, n, 2)).unwrap();
        assert!(rep.quadratic.value > 0.0 && rep.quadratic_nonnegative);
        assert!(rep.balanced(3.0), "{rep:?}");
    }

    #[test]
    fn scan_is_minimal_at_optimum() {
        let set = scalar(-1.0, 1.0, 0.0, 1.0, 1.0);
        let (ric, eta, _) = optimal(&set, 64);
        let setup = ScanSetup {
            burn: bundle(9, 4000, 1),
            fresh: bundle(1, 4000, 2),
            stability: bundle(10, 500, 3),
            x_start: Mat::scalar(0.0),
            k_burn: 8,
        };
        let table = optimality_scan(&set, &ric, &eta, &default_perturbations(1, 1), &setup).unwrap();
        assert_eq!(table.argmin_epsilon, Some(0.0));
        assert!(table.min_at_zero_within_ci);
        assert!(table.kappa_positive(), "{table:?}");
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epsilon,cost,stderr,stable_flag\n"));
    }
}
