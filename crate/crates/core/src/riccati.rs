//! Stochastic Riccati equation by policy (Kleinman) iteration over linear
//! matrix BSDEs, and Monte Carlo stabilizer certificates.

use crate::bsde::{
    check_symmetric_psd, lyapunov_drift, solve_fixed_point, BsdeGridSolution, Driver, FixedPointOptions,
    GridCoeff, RegressionBasis, SampleSet,
};
use crate::coefficients::{
    combine_kind, sampled_sup, CoeffKind, CoefficientFn, FeedbackLaw, PathPoint, PeriodicCoefficientSet,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::sde::{self, PathBundle, Recording, StabilityReport};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

/// Samples used to bound composed coefficients.
const BOUND_SAMPLES: usize = 256;
const BOUND_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiOptions {
    pub basis: RegressionBasis,
    /// Outer tolerance on `|K⁽ᴺ⁺¹⁾₀ − K⁽ᴺ⁾₀|_F`; inner solves use a tenth of it.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            basis: RegressionBasis::default(),
            tol: 1e-6,
            max_outer: 20,
            max_inner: 200,
        }
    }
}

/// One outer policy-iteration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KleinmanStep {
    pub iteration: usize,
    pub k0: Mat,
    pub update_norm: f64,
    /// Standard error of `k0` from the node-0 regression residual.
    pub stderr: f64,
    pub inner_iterations: usize,
    /// `λ_min(K⁽ᴺ⁻¹⁾₀ − K⁽ᴺ⁾₀)`; absent for the first iterate.
    pub descent_min_eigenvalue: Option<f64>,
    pub descent_allowance: Option<f64>,
}

/// `(K, L)` on the grid, the optimal gain and the iteration record.
#[derive(Clone)]
pub struct RiccatiSolution {
    pub k: Arc<BsdeGridSolution>,
    /// `−R⁻¹(BᵀK + S)` as a within-period functional.
    pub theta: CoefficientFn,
    pub trace: Vec<KleinmanStep>,
    pub initial_stability: Option<StabilityReport>,
}

impl std::fmt::Debug for RiccatiSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RiccatiSolution")
            .field("k0", &self.k.fixed_point)
            .field("outer_iterations", &self.trace.len())
            .finish()
    }
}

impl RiccatiSolution {
    pub fn k0(&self) -> Mat {
        self.k.fixed_point
    }

    pub fn outer_iterations(&self) -> usize {
        self.trace.len()
    }

    /// Optimal gain paired with a zero offset.
    pub fn feedback(&self, id: impl Into<String>) -> FeedbackLaw {
        let m = self.theta.shape().0;
        FeedbackLaw::new(id, self.theta.clone(), CoefficientFn::zeros(m, 1))
    }

    /// True when every step after the first satisfied the descent check.
    pub fn is_monotone(&self) -> bool {
        self.trace.iter().all(|s| match (s.descent_min_eigenvalue, s.descent_allowance) {
            (Some(e), Some(a)) => e >= -a,
            _ => true,
        })
    }

    pub fn header(&self, residual: Option<&RiccatiResidual>) -> RiccatiHeader {
        RiccatiHeader {
            schema: "ergolq.riccati/1".into(),
            n: self.k.shape.0,
            m: self.theta.shape().0,
            tau: self.k.tau,
            steps_per_period: self.k.steps_per_period,
            n_samples: self.k.n_samples,
            k0: self.k0(),
            outer_iterations: self.trace.len(),
            monotone: self.is_monotone(),
            trace: self.trace.clone(),
            residual: residual.cloned(),
        }
    }

    /// Columns `t, theta..` with the gain evaluated on the node means of `K`
    /// and the coefficients at zero within-period displacement.
    pub fn write_theta_csv<W: Write>(&self, set: &PeriodicCoefficientSet, mut w: W) -> Result<()> {
        let (m, n) = self.theta.shape();
        write!(w, "t")?;
        for i in 0..m {
            for j in 0..n {
                write!(w, ",theta{i}{j}")?;
            }
        }
        writeln!(w)?;
        let dt = self.k.dt();
        for i in 0..=self.k.steps_per_period {
            let phase = if i == self.k.steps_per_period { 0.0 } else { i as f64 * dt };
            let p = PathPoint::deterministic(phase);
            let th = gain(&set.b.at(&p), &set.r.at(&p), &set.s.at(&p), &self.k.node_means[i]);
            write!(w, "{}", i as f64 * dt)?;
            for v in th.entries() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// JSON header of an exported solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiHeader {
    pub schema: String,
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub steps_per_period: usize,
    pub n_samples: usize,
    pub k0: Mat,
    pub outer_iterations: usize,
    pub monotone: bool,
    pub trace: Vec<KleinmanStep>,
    pub residual: Option<RiccatiResidual>,
}

/// `−R⁻¹(BᵀK + S)`; NaN when `R` is singular.
#[inline]
pub fn gain(b: &Mat, r: &Mat, s: &Mat, k: &Mat) -> Mat {
    let rhs = b.transpose() * *k + *s;
    r.symmetrize()
        .solve(&rhs)
        .map(|x| -x)
        .unwrap_or_else(|| Mat::filled(rhs.rows(), rhs.cols(), f64::NAN))
}

fn transposed(f: &CoefficientFn) -> CoefficientFn {
    if let Some(v) = f.constant_value() {
        return CoefficientFn::constant(v.transpose());
    }
    let g = f.clone();
    let (r, c) = f.shape();
    CoefficientFn::custom(f.kind(), c, r, f.bound(), move |p| g.at(p).transpose())
}

fn sampled_bound(f: &CoefficientFn, tau: f64) -> CoefficientFn {
    let sup = sampled_sup(f, tau, BOUND_SAMPLES, 0xb0_u64);
    let g = f.clone();
    let (r, c) = f.shape();
    CoefficientFn::custom(f.kind(), r, c, sup * BOUND_MARGIN, move |p| g.at(p))
}

fn check_r_invertible(set: &PeriodicCoefficientSet) -> Result<()> {
    let grid = 64;
    for i in 0..grid {
        let phase = set.tau * i as f64 / grid as f64;
        for s in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let p = PathPoint::with_sum(phase, &[], s);
            let r = set.r.at(&p).symmetrize();
            if r.inverse().is_none() {
                return Err(Error::Singular { matrix: "R".into(), phase });
            }
        }
    }
    Ok(())
}

/// `Ã = A − BR⁻¹S` and `Q̃ = Q − SᵀR⁻¹S`. With `S ≡ 0` the inputs are
/// returned unchanged.
pub fn reduce_cross_term(set: &PeriodicCoefficientSet) -> Result<(CoefficientFn, CoefficientFn)> {
    check_r_invertible(set)?;
    if set.s.constant_value().is_some_and(|s| s.max_abs() == 0.0) {
        return Ok((set.a.clone(), set.q.clone()));
    }
    let consts = (set.a.constant_value(), set.b.constant_value(), set.q.constant_value(), set.r.constant_value(), set.s.constant_value());
    if let (Some(a), Some(b), Some(q), Some(r), Some(s)) = consts {
        let rs = r.symmetrize().solve(&s).ok_or(Error::Singular { matrix: "R".into(), phase: 0.0 })?;
        return Ok((
            CoefficientFn::constant(a - b * rs),
            CoefficientFn::constant((q - s.transpose() * rs).symmetrize()),
        ));
    }
    let kind = [&set.a, &set.b, &set.q, &set.r, &set.s]
        .iter()
        .fold(CoeffKind::Constant, |k, f| combine_kind(k, f.kind()));
    let (a, b, r, s) = (set.a.clone(), set.b.clone(), set.r.clone(), set.s.clone());
    let (n, _) = set.a.shape();
    let a_tilde = CoefficientFn::custom(kind, n, n, f64::INFINITY, move |p| {
        let sp = s.at(p);
        let rs = r.at(p).symmetrize().solve(&sp).unwrap_or_else(|| Mat::filled(sp.rows(), sp.cols(), f64::NAN));
        a.at(p) - b.at(p) * rs
    });
    let (q, r, s) = (set.q.clone(), set.r.clone(), set.s.clone());
    let q_tilde = CoefficientFn::custom(kind, n, n, f64::INFINITY, move |p| {
        let sp = s.at(p);
        let rs = r.at(p).symmetrize().solve(&sp).unwrap_or_else(|| Mat::filled(sp.rows(), sp.cols(), f64::NAN));
        (q.at(p) - sp.transpose() * rs).symmetrize()
    });
    Ok((sampled_bound(&a_tilde, set.tau), sampled_bound(&q_tilde, set.tau)))
}

/// Certifies `Θ` by fitting the second-moment decay of the fundamental
/// solution of `[A + BΘ, C]` at the period ends of `bundle`. Runs whose
/// paths all overflow are reported unstable.
pub fn stabilizer_check(theta: &CoefficientFn, set: &PeriodicCoefficientSet, bundle: &PathBundle) -> Result<StabilityReport> {
    let fb = FeedbackLaw::new("stabilizer-check", theta.clone(), CoefficientFn::zeros(set.m, 1));
    fb.check_dims(set.n, set.m)?;
    let traj = sde::simulate_fundamental(set, Some(&fb), bundle, &Recording::PeriodEnds)?;
    match sde::estimate_second_moment_decay(&traj) {
        Ok(r) => Ok(r),
        Err(Error::Degenerate(_)) => Ok(StabilityReport {
            beta_hat: f64::NAN,
            lambda_hat: f64::NAN,
            lambda_stderr: f64::NAN,
            lambda_ci95: [f64::NAN, f64::NAN],
            r_squared: f64::NAN,
            delta_hat: None,
            n_overflow: traj.overflow_count(),
            stable: false,
        }),
        Err(e) => Err(e),
    }
}

/// The shipped stabilizer if it passes, otherwise the first `Θ = −κBᵀ` with
/// `κ ∈ {0, 1, 10}` that does.
pub fn find_stabilizer(set: &PeriodicCoefficientSet, bundle: &PathBundle) -> Result<(CoefficientFn, StabilityReport)> {
    let mut last: Option<StabilityReport> = None;
    if let Some(th) = &set.stabilizer {
        let rep = stabilizer_check(th, set, bundle)?;
        if rep.stable {
            return Ok((th.clone(), rep));
        }
        last = Some(rep);
    }
    let bt = transposed(&set.b);
    for kappa in [0.0, 1.0, 10.0] {
        let th = bt.scaled(-kappa);
        let rep = stabilizer_check(&th, set, bundle)?;
        if rep.stable {
            return Ok((th, rep));
        }
        last = Some(rep);
    }
    let rep = last.expect("at least one candidate was checked");
    Err(Error::NotStabilizing {
        lambda_hat: rep.lambda_hat,
        stderr: rep.lambda_stderr,
    })
}

enum Gain<'a> {
    Given(GridCoeff<'a>),
    FromK(&'a BsdeGridSolution),
}

/// Linear drift of one policy-evaluation step:
/// `KÂ + ÂᵀK + CᵀKC + LC + CᵀL + Q + ΘᵀRΘ` with `Â = A + BΘ`.
struct PolicyDriver<'a> {
    a: GridCoeff<'a>,
    b: GridCoeff<'a>,
    c: GridCoeff<'a>,
    q: GridCoeff<'a>,
    r: GridCoeff<'a>,
    gain: Gain<'a>,
    zero_cross: Mat,
}

impl PolicyDriver<'_> {
    #[inline]
    fn theta(&self, node: usize, p: &PathPoint, b: &Mat, r: &Mat) -> Mat {
        match &self.gain {
            Gain::Given(g) => g.at(node, p),
            Gain::FromK(k) => gain(b, r, &self.zero_cross, &k.value(node, p.partial_sum)),
        }
    }
}

impl Driver for PolicyDriver<'_> {
    #[inline]
    fn drift(&self, _: usize, node: usize, p: &PathPoint, k: &Mat, l: &Mat) -> Mat {
        let b = self.b.at(node, p);
        let r = self.r.at(node, p);
        let th = self.theta(node, p, &b, &r);
        let a = self.a.at(node, p) + b * th;
        let src = (self.q.at(node, p) + th.transpose() * r * th).symmetrize();
        lyapunov_drift(&a, &self.c.at(node, p), &src, k, l)
    }
}

/// Policy iteration for `K A + AᵀK + CᵀKC + LC + CᵀL + Q − KBR⁻¹BᵀK`:
/// each step solves the linear BSDE for the current gain, then sets
/// `Θ = −R⁻¹BᵀK` from the new solution. `theta_init` must stabilize
/// `[A, C; B, 0]`; it is checked on `stability` before iterating.
#[allow(clippy::too_many_arguments)]
pub fn kleinman_solve(
    a: &CoefficientFn,
    c: &CoefficientFn,
    b: &CoefficientFn,
    q: &CoefficientFn,
    r: &CoefficientFn,
    theta_init: &CoefficientFn,
    samples: &SampleSet,
    stability: &PathBundle,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    let set = PeriodicCoefficientSet::new("policy-iteration", samples.tau, a.clone(), b.clone(), q.clone(), r.clone())?
        .with_noise(c.clone(), CoefficientFn::zeros(b.shape().0, 1))?;
    let init = stabilizer_check(theta_init, &set, stability)?;
    if !init.stable {
        return Err(Error::NotStabilizing {
            lambda_hat: init.lambda_hat,
            stderr: init.lambda_stderr,
        });
    }
    let mut sol = kleinman_iterate(&set, theta_init, samples, opts)?;
    sol.initial_stability = Some(init);
    Ok(sol)
}

/// One policy evaluation: the linear BSDE for a fixed gain `theta` on the
/// data of `set` (cross term ignored).
pub fn policy_evaluation(
    set: &PeriodicCoefficientSet,
    theta: &CoefficientFn,
    samples: &SampleSet,
    opts: &RiccatiOptions,
) -> Result<BsdeGridSolution> {
    let (tau, spp) = (samples.tau, samples.steps_per_period);
    let g = |f| GridCoeff::new(f, tau, spp);
    let driver = PolicyDriver {
        a: g(&set.a),
        b: g(&set.b),
        c: g(&set.c),
        q: g(&set.q),
        r: g(&set.r),
        gain: Gain::Given(g(theta)),
        zero_cross: Mat::zeros(set.m, set.n),
    };
    let fp = FixedPointOptions {
        tol: opts.tol / 10.0,
        max_iter: opts.max_inner,
        ..FixedPointOptions::default()
    };
    let sol = solve_fixed_point(&driver, (set.n, set.n), samples, &opts.basis, true, &fp)?;
    check_symmetric_psd(&sol, true)?;
    Ok(sol)
}

fn kleinman_iterate(
    set: &PeriodicCoefficientSet,
    theta_init: &CoefficientFn,
    samples: &SampleSet,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    let (n, m) = (set.n, set.m);
    if theta_init.shape() != (m, n) {
        return Err(Error::ShapeMismatch {
            what: "initial gain".into(),
            expected: (m, n),
            actual: theta_init.shape(),
        });
    }
    let (tau, spp) = (samples.tau, samples.steps_per_period);
    let g = |f| GridCoeff::new(f, tau, spp);
    let inner = FixedPointOptions {
        tol: opts.tol / 10.0,
        max_iter: opts.max_inner,
        statistical_floor: None,
        initial: None,
    };
    let mut trace: Vec<KleinmanStep> = Vec::new();
    let mut prev: Option<BsdeGridSolution> = None;
    for it in 1..=opts.max_outer {
        let driver = PolicyDriver {
            a: g(&set.a),
            b: g(&set.b),
            c: g(&set.c),
            q: g(&set.q),
            r: g(&set.r),
            gain: match &prev {
                None => Gain::Given(g(theta_init)),
                Some(k) => Gain::FromK(k),
            },
            zero_cross: Mat::zeros(m, n),
        };
        let warm = FixedPointOptions {
            initial: prev.as_ref().map(|k| k.fixed_point),
            ..inner.clone()
        };
        let next = solve_fixed_point(&driver, (n, n), samples, &opts.basis, true, &warm)?;
        check_symmetric_psd(&next, true)?;
        let k0 = next.fixed_point;
        let se = next.node_stderr[0];
        let (update, descent, allowance) = match &prev {
            None => (f64::INFINITY, None, None),
            Some(p) => {
                let d = (p.fixed_point - k0).symmetrize();
                let combined = (se * se + p.node_stderr[0].powi(2)).sqrt();
                // Each time-0 value is only resolved to the inner tolerance.
                let allow = 3.0 * combined + 2.0 * inner.tol + 1e-10 * (1.0 + k0.frobenius());
                (d.frobenius(), Some(d.min_eigenvalue()), Some(allow))
            }
        };
        trace.push(KleinmanStep {
            iteration: it,
            k0,
            update_norm: update,
            stderr: se,
            inner_iterations: next.trace.len(),
            descent_min_eigenvalue: descent,
            descent_allowance: allowance,
        });
        if let (Some(e), Some(a)) = (descent, allowance) {
            if e < -a {
                return Err(Error::MonotonicityViolated {
                    iteration: it,
                    min_eigenvalue: e,
                    allowance: a,
                });
            }
        }
        let done = update < opts.tol;
        prev = Some(next);
        if done {
            let k = Arc::new(prev.take().expect("just stored"));
            let theta = gain_fn(set, &k);
            return Ok(RiccatiSolution {
                k,
                theta,
                trace,
                initial_stability: None,
            });
        }
    }
    Err(Error::NoContraction {
        iterations: opts.max_outer,
        last_update: trace.last().map_or(f64::NAN, |s| s.update_norm),
    })
}

/// `−R⁻¹(BᵀK + S)` read from the grid solution at any `(phase, prefix)`.
pub fn gain_fn(set: &PeriodicCoefficientSet, k: &Arc<BsdeGridSolution>) -> CoefficientFn {
    let (n, m) = (set.n, set.m);
    let kind = if set.is_deterministic() {
        CoeffKind::DeterministicPeriodic
    } else {
        CoeffKind::PathFunctional
    };
    let (b, r, s) = (set.b.clone(), set.r.clone(), set.s.clone());
    let kk = Arc::clone(k);
    let eval = move |p: &PathPoint| gain(&b.at(p), &r.at(p), &s.at(p), &kk.value_at_phase(p.phase, p.partial_sum));
    // Bound from the support ends and centre at every node.
    let mut sup: f64 = 0.0;
    let dt = k.dt();
    for (i, &(lo, hi)) in k.support.iter().enumerate().take(k.steps_per_period) {
        for j in 0..=8 {
            let sv = lo + (hi - lo) * j as f64 / 8.0;
            let p = PathPoint::with_sum(i as f64 * dt, &[], sv);
            sup = sup.max(eval(&p).max_abs());
        }
    }
    CoefficientFn::custom(kind, m, n, sup * BOUND_MARGIN, eval)
}

/// Reduces the cross term, runs the policy iteration on `(Ã, C, B, Q̃, R)`
/// and returns `Θ⁰ = −R⁻¹(BᵀK + S)`. Without `theta_init` a stabilizer is
/// searched with [`find_stabilizer`].
pub fn solve_stochastic_riccati(
    set: &PeriodicCoefficientSet,
    theta_init: Option<&CoefficientFn>,
    samples: &SampleSet,
    stability: &PathBundle,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    set.validate_shapes()?;
    let pos = crate::coefficients::check_positivity(set, 256, 0x9e37)?;
    if !pos.passed {
        return Err(Error::PositivityViolated {
            min_eigenvalue: pos.margin_r.min(pos.margin_qsrs),
            floor: 0.0,
        });
    }
    let (theta, init) = match theta_init {
        Some(t) => {
            let rep = stabilizer_check(t, set, stability)?;
            if !rep.stable {
                return Err(Error::NotStabilizing {
                    lambda_hat: rep.lambda_hat,
                    stderr: rep.lambda_stderr,
                });
            }
            (t.clone(), rep)
        }
        None => find_stabilizer(set, stability)?,
    };
    let (a_tilde, q_tilde) = reduce_cross_term(set)?;
    let reduced = PeriodicCoefficientSet::new(
        format!("{}-reduced", set.name),
        set.tau,
        a_tilde,
        set.b.clone(),
        q_tilde,
        set.r.clone(),
    )?
    .with_noise(set.c.clone(), CoefficientFn::zeros(set.n, 1))?;
    // A + BΘ = Ã + BΘ̃ with Θ̃ = Θ + R⁻¹S.
    let theta_reduced = if set.s.constant_value().is_some_and(|s| s.max_abs() == 0.0) {
        theta
    } else {
        let (r, s, t) = (set.r.clone(), set.s.clone(), theta.clone());
        let kind = combine_kind(combine_kind(r.kind(), s.kind()), t.kind());
        let (m, n) = t.shape();
        sampled_bound(
            &CoefficientFn::custom(kind, m, n, f64::INFINITY, move |p| {
                let sp = s.at(p);
                let rs = r.at(p).symmetrize().solve(&sp).unwrap_or_else(|| Mat::filled(m, n, f64::NAN));
                t.at(p) + rs
            }),
            set.tau,
        )
    };
    let mut sol = kleinman_iterate(&reduced, &theta_reduced, samples, opts)?;
    sol.theta = gain_fn(set, &sol.k);
    sol.initial_stability = Some(init);
    Ok(sol)
}

/// Defect of a solution plugged back into the discrete equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiResidual {
    /// Mean over paths and nodes of `|K_{i+1} − K_i + f·dt − L_iΔW_i|_F`,
    /// relative to `|K₀|_F`.
    pub residual: f64,
    /// `|E[node-averaged defect]|_F` relative to `|K₀|_F`: zero in expectation
    /// for a converged solution.
    pub bias: f64,
    /// Standard error of `bias`.
    pub floor: f64,
    pub n_paths: usize,
}

impl RiccatiResidual {
    /// `bias` within three standard errors (or below `1e-6` when exact).
    pub fn is_consistent(&self) -> bool {
        self.bias <= 3.0 * self.floor + 1e-6
    }
}

/// Evaluates the defect of `(K, L)` on fresh one-period paths. The drift is
/// the Riccati drift with the gain frozen at the left node,
/// `f = KÂ + ÂᵀK + CᵀKC + LC + CᵀL + Q + ΘᵀRΘ + ΘᵀS + SᵀΘ` with
/// `Θ = −R⁻¹(BᵀK_i + S)` and `Â = A + BΘ`, which is the discrete scheme the
/// solver converges to.
pub fn riccati_residual(solution: &RiccatiSolution, set: &PeriodicCoefficientSet, bundle_fresh: &PathBundle) -> Result<RiccatiResidual> {
    let k = &solution.k;
    if k.shape != (set.n, set.n) {
        return Err(Error::ShapeMismatch {
            what: "K".into(),
            expected: (set.n, set.n),
            actual: k.shape,
        });
    }
    if bundle_fresh.steps_per_period != k.steps_per_period || (bundle_fresh.tau - k.tau).abs() > 1e-12 {
        return Err(Error::InvalidArgument("fresh bundle must use the solution grid".into()));
    }
    let spp = k.steps_per_period;
    let dt = k.dt();
    let n = set.n;
    let per_path: Vec<(f64, Mat)> = bundle_fresh.map_paths(|_, incs| {
        let mut norm_sum = 0.0;
        let mut defect_sum = Mat::zeros(n, n);
        let _ = sde::for_each_node(incs, spp, dt, 0, spp, |node, p, dw| {
            let s0 = p.partial_sum;
            let s1 = s0 + dw;
            let ki = k.value(node, s0);
            let kn = k.value(node + 1, s1);
            let li = k.integrand_value(node, s0);
            let c = set.sample(p);
            let th = gain(&c.b, &c.r, &c.s, &ki);
            let a = c.a + c.b * th;
            let cross = th.transpose() * c.s;
            let src = (c.q + th.transpose() * c.r * th + cross + cross.transpose()).symmetrize();
            let f = lyapunov_drift(&a, &c.c, &src, &kn, &li);
            let d = (kn - ki).axpy(dt, &f).axpy(-dw, &li);
            norm_sum += d.frobenius();
            defect_sum += d;
            true
        });
        (norm_sum / spp as f64, defect_sum.scale(1.0 / spp as f64))
    });
    let scale = {
        let f = k.fixed_point.frobenius();
        if f > 0.0 { f } else { 1.0 }
    };
    let norms: Vec<f64> = per_path.iter().map(|(x, _)| *x).collect();
    let residual = bundle_fresh.estimate(&norms).value / scale;
    let mut bias2 = 0.0;
    let mut se2 = 0.0;
    for e in 0..n * n {
        let xs: Vec<f64> = per_path.iter().map(|(_, d)| d.flat(e)).collect();
        let est = bundle_fresh.estimate(&xs);
        bias2 += est.value * est.value;
        se2 += est.stderr * est.stderr;
    }
    Ok(RiccatiResidual {
        residual,
        bias: bias2.sqrt() / scale,
        floor: se2.sqrt() / scale,
        n_paths: bundle_fresh.n_paths,
    })
}

/// Writes `riccati.json`, `riccati_k.csv` and `riccati_theta.csv` into `dir`.
pub fn export_solution(
    solution: &RiccatiSolution,
    set: &PeriodicCoefficientSet,
    residual: Option<&RiccatiResidual>,
    dir: &std::path::Path,
) -> Result<()> {
    let header = solution.header(residual);
    std::fs::write(dir.join("riccati.json"), serde_json::to_string_pretty(&header)?)?;
    let f = std::fs::File::create(dir.join("riccati_k.csv"))?;
    solution.k.write_csv(std::io::BufWriter::new(f))?;
    let f = std::fs::File::create(dir.join("riccati_theta.csv"))?;
    solution.write_theta_csv(set, std::io::BufWriter::new(f))?;
    Ok(())
}
