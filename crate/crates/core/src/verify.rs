//! The acceptance suite: moment decay, BSDE and Riccati accuracy, the
//! stabilizer certificate, cost equivalence, the value formula, optimality,
//! contraction and the completion of squares.

use crate::bsde::{solve_linear_matrix_bsde, FixedPointOptions, RegressionBasis, SampleSet};
use crate::coefficients::{builtin_scenario, catalog_names, resolve_scenario, CoefficientFn, FeedbackLaw, PeriodicCoefficientSet};
use crate::ergodic::{
    burn_in_state, completion_of_square_check, default_perturbations, finite_horizon_costs, optimality_scan, single_period_cost,
    solve_optimal_chain, suggested_k_burn, ChainOptions, CostEstimate, OptimalChain, ScanSetup, ValueEstimate,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::oracle::{periodic_lyapunov_ode, stationary_chain_scalar, DEFAULT_NODES_PER_PERIOD};
use crate::riccati::{find_stabilizer, stabilizer_check, RiccatiSolution};
use crate::sde::{contraction_check, derive_seed, simulate_fundamental, PathBundle, Recording};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

pub const SCHEMA: &str = "ergolq.verify/1";

/// Wall-time budget of the whole suite, seconds.
pub const SUITE_TIME_LIMIT: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
    A9,
    A10,
}

impl Criterion {
    pub const ALL: [Criterion; 10] = [
        Criterion::A1,
        Criterion::A2,
        Criterion::A3,
        Criterion::A4,
        Criterion::A5,
        Criterion::A6,
        Criterion::A7,
        Criterion::A8,
        Criterion::A9,
        Criterion::A10,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Criterion::A1 => "A1",
            Criterion::A2 => "A2",
            Criterion::A3 => "A3",
            Criterion::A4 => "A4",
            Criterion::A5 => "A5",
            Criterion::A6 => "A6",
            Criterion::A7 => "A7",
            Criterion::A8 => "A8",
            Criterion::A9 => "A9",
            Criterion::A10 => "A10",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Criterion::A1 => "moment decay of the fundamental solution",
            Criterion::A2 => "Lyapunov BSDE against the periodic ODE",
            Criterion::A3 => "Riccati iteration, deterministic constant case",
            Criterion::A4 => "Riccati iteration, multiplicative noise",
            Criterion::A5 => "stabilizer certificate of the optimal gain",
            Criterion::A6 => "long-run and single-period costs agree",
            Criterion::A7 => "value formula",
            Criterion::A8 => "optimality scan",
            Criterion::A9 => "contraction of closed-loop differences",
            Criterion::A10 => "completion of squares",
        }
    }

    /// Per-criterion wall-time limit, seconds.
    pub fn time_limit(self) -> Option<f64> {
        match self {
            Criterion::A1 => Some(30.0),
            Criterion::A2 | Criterion::A6 => Some(120.0),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Criterion> {
        Criterion::ALL.into_iter().find(|c| c.label().eq_ignore_ascii_case(s))
    }
}

/// Sizes and seed of a suite run. Path counts not listed are pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Scenario for the equivalence, value and optimality criteria.
    pub scenario: String,
    /// Paths of the ergodic cost estimators (A6 to A8 and A10).
    pub ergodic_paths: usize,
    pub steps_per_period: usize,
    /// Riccati and adjoint tolerance.
    pub tol: f64,
    /// Regression degree override; see [`crate::ergodic::default_basis`].
    pub degree: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 7,
            scenario: "scalar-constant".into(),
            ergodic_paths: 20_000,
            steps_per_period: 64,
            tol: 1e-6,
            degree: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: Criterion,
    pub title: String,
    pub passed: bool,
    pub summary: String,
    pub metrics: BTreeMap<String, f64>,
    /// Wall time; kept out of the JSON so reruns reproduce it byte for byte.
    #[serde(skip_serializing, default)]
    pub seconds: f64,
    pub time_limit: Option<f64>,
    pub error: Option<String>,
}

impl CriterionResult {
    /// `A3 PASS Riccati iteration, ...: summary [0.4 s]`.
    pub fn line(&self) -> String {
        format!(
            "{:<3} {} {}: {} [{:.1} s]",
            self.id.label(),
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.summary,
            self.seconds
        )
    }

    pub fn metric(&self, key: &str) -> f64 {
        self.metrics.get(key).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema: String,
    pub version: String,
    pub options: VerifyOptions,
    pub criteria: Vec<CriterionResult>,
    #[serde(skip_serializing, default)]
    pub seconds: f64,
    pub time_limit: f64,
    pub passed: bool,
}

impl SuiteReport {
    pub fn get(&self, id: Criterion) -> Option<&CriterionResult> {
        self.criteria.iter().find(|c| c.id == id)
    }
}

struct Outcome {
    passed: bool,
    summary: String,
    metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn new(passed: bool, summary: String, metrics: &[(&str, f64)]) -> Self {
        Outcome {
            passed,
            summary,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

fn combined(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Shared work between criteria.
struct Context {
    opts: VerifyOptions,
    subject: PeriodicCoefficientSet,
    chains: BTreeMap<String, OptimalChain>,
    subject_costs: Option<SubjectCosts>,
}

#[derive(Clone, Copy)]
struct SubjectCosts {
    long: CostEstimate,
    short: CostEstimate,
    single: CostEstimate,
    value: ValueEstimate,
    k_burn: usize,
}

impl Context {
    fn bundle(&self, tau: f64, periods: usize, paths: usize, label: &str) -> Result<PathBundle> {
        PathBundle::new(tau, self.opts.steps_per_period, periods, paths, derive_seed(self.opts.seed, label))
    }

    fn chain_options(&self, set: &PeriodicCoefficientSet) -> ChainOptions {
        ChainOptions {
            seed: derive_seed(self.opts.seed, &set.name),
            steps_per_period: self.opts.steps_per_period,
            samples: if set.is_deterministic() { 1000 } else { 8000 },
            tol: self.opts.tol,
            basis: self.opts.degree.map(|d| RegressionBasis { degree: d, ..RegressionBasis::default() }),
            ..ChainOptions::default()
        }
    }

    fn chain(&mut self, set: &PeriodicCoefficientSet) -> Result<&OptimalChain> {
        if !self.chains.contains_key(&set.name) {
            let chain = solve_optimal_chain(set, &self.chain_options(set))?;
            self.chains.insert(set.name.clone(), chain);
        }
        Ok(&self.chains[&set.name])
    }

    fn riccati(&mut self, name: &str) -> Result<(PeriodicCoefficientSet, RiccatiSolution)> {
        let set = builtin_scenario(name)?;
        let ric = self.chain(&set)?.riccati.clone();
        Ok((set, ric))
    }

    fn subject_costs(&mut self) -> Result<SubjectCosts> {
        if let Some(c) = self.subject_costs {
            return Ok(c);
        }
        let set = self.subject.clone();
        let n = self.opts.ergodic_paths;
        let chain = self.chain(&set)?.clone();
        let fb = &chain.feedback;
        let stability = stabilizer_check(&fb.theta, &set, &self.bundle(set.tau, 10, 2000, "a6-stability")?)?;
        let k_burn = suggested_k_burn(stability.lambda_hat, set.tau)?;
        let x0 = Mat::zeros(set.n, 1);
        let long_bundle = self.bundle(set.tau, 50, n, "a6-long")?;
        let horizons = finite_horizon_costs(&set, fb, &x0, &[10.0 * set.tau, 50.0 * set.tau], &long_bundle)?;
        let (short, long) = (horizons[0], horizons[1]);
        let state = burn_in_state(&set, fb, &self.bundle(set.tau, k_burn + 1, n, "a6-burn")?, &x0, k_burn)?;
        let single = single_period_cost(&set, fb, &state, &self.bundle(set.tau, 1, n, "a6-fresh")?)?;
        let value = chain.value(&set, 4000, self.opts.seed)?;
        let costs = SubjectCosts {
            long,
            short,
            single,
            value,
            k_burn,
        };
        self.subject_costs = Some(costs);
        Ok(costs)
    }
}

/// Scalar `dX = aX dt + cX dW` with no control.
fn moment_decay_set(a: f64, c: f64) -> Result<PeriodicCoefficientSet> {
    let f = CoefficientFn::scalar;
    PeriodicCoefficientSet::new("moment-decay", 1.0, f(a), f(0.0), f(1.0), f(1.0))?.with_noise(f(c), f(0.0))
}

fn a1(ctx: &mut Context) -> Result<Outcome> {
    let (a, c) = (-1.0, 0.5);
    let set = moment_decay_set(a, c)?;
    let spp = 64;
    let bundle = PathBundle::new(1.0, spp, 1, 100_000, derive_seed(ctx.opts.seed, "a1"))?;
    let traj = simulate_fundamental(&set, None, &bundle, &Recording::Nodes(vec![spp / 2, spp]))?;
    let mut passed = true;
    let mut metrics = Vec::new();
    let mut parts = Vec::new();
    for (k, (t, key)) in [(0.5, "t0.5"), (1.0, "t1")].into_iter().enumerate() {
        let est = traj.second_moment(k);
        let exact = ((2.0 * a + c * c) * t).exp();
        let tol = (0.02 * exact).max(3.0 * est.stderr);
        let err = (est.value - exact).abs();
        passed &= err <= tol;
        parts.push(format!("E|Phi_{t}|^2 = {:.5} vs {:.5} (err {:.2e}, tol {:.2e})", est.value, exact, err, tol));
        metrics.push((format!("moment_{key}"), est.value));
        metrics.push((format!("stderr_{key}"), est.stderr));
        metrics.push((format!("exact_{key}"), exact));
        metrics.push((format!("tol_{key}"), tol));
    }
    let metrics: Vec<(&str, f64)> = metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(Outcome::new(passed, parts.join("; "), &metrics))
}

fn a2(ctx: &mut Context) -> Result<Outcome> {
    let set = builtin_scenario("planar-deterministic-periodic")?;
    let identity = CoefficientFn::constant(Mat::identity(set.n));
    let bundle = PathBundle::new(set.tau, ctx.opts.steps_per_period, 1, 20_000, derive_seed(ctx.opts.seed, "a2"))?;
    let samples = SampleSet::from_bundle(&bundle);
    let sol = solve_linear_matrix_bsde(&set.a, &set.c, &identity, &samples, &RegressionBasis::default(), &FixedPointOptions::default(), true)?;
    let ode = periodic_lyapunov_ode(&set, |_| Mat::identity(set.n), DEFAULT_NODES_PER_PERIOD)?;
    let dt = set.tau / ctx.opts.steps_per_period as f64;
    let worst = (0..=ctx.opts.steps_per_period)
        .map(|i| {
            let reference = ode.at(i as f64 * dt);
            (sol.node_means[i] - reference).frobenius() / reference.frobenius()
        })
        .fold(0.0, f64::max);
    Ok(Outcome::new(
        worst < 0.05,
        format!("max node-wise relative Frobenius error {worst:.3e} (< 5e-2)"),
        &[("max_relative_error", worst), ("k0_11", sol.fixed_point.get(0, 0))],
    ))
}

fn riccati_criterion(ctx: &mut Context, name: &str, exact: f64, rel: f64, max_outer: Option<usize>) -> Result<Outcome> {
    let (_, ric) = ctx.riccati(name)?;
    let k0 = ric.k0().get(0, 0);
    let err = (k0 - exact).abs() / exact;
    let iters = ric.outer_iterations();
    let monotone = ric.is_monotone();
    let mut passed = err < rel && monotone;
    let mut summary = format!("K0 = {k0:.6} vs {exact:.6} (rel err {err:.2e} < {rel}), monotone {monotone}, {iters} outer iterations");
    if let Some(m) = max_outer {
        passed &= iters <= m;
        summary.push_str(&format!(" (<= {m})"));
    }
    Ok(Outcome::new(
        passed,
        summary,
        &[
            ("k0", k0),
            ("exact", exact),
            ("relative_error", err),
            ("outer_iterations", iters as f64),
            ("monotone", f64::from(u8::from(monotone))),
        ],
    ))
}

fn a5(ctx: &mut Context) -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut metrics = Vec::new();
    for name in ["scalar-constant", "scalar-noisy-constant"] {
        let (set, ric) = ctx.riccati(name)?;
        let bundle = ctx.bundle(set.tau, 10, 4000, &format!("a5-{name}"))?;
        let rep = stabilizer_check(&ric.theta, &set, &bundle)?;
        passed &= rep.stable && rep.lambda_ci95[0] > 0.0;
        parts.push(format!(
            "{name}: lambda_hat {:.4}, 95% CI [{:.4}, {:.4}]",
            rep.lambda_hat, rep.lambda_ci95[0], rep.lambda_ci95[1]
        ));
        metrics.push((format!("lambda_hat_{name}"), rep.lambda_hat));
        metrics.push((format!("lambda_ci_low_{name}"), rep.lambda_ci95[0]));
    }
    let metrics: Vec<(&str, f64)> = metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(Outcome::new(passed, parts.join("; "), &metrics))
}

fn a6(ctx: &mut Context) -> Result<Outcome> {
    let c = ctx.subject_costs()?;
    let gap50 = (c.long.value - c.single.value).abs();
    let gap10 = (c.short.value - c.single.value).abs();
    let se = combined(c.long.stderr, c.single.stderr);
    let passed = gap50 < 3.0 * se && gap50 < gap10;
    Ok(Outcome::new(
        passed,
        format!(
            "J_50/50 = {:.5} +- {:.5}, single period {:.5} +- {:.5}, |gap| {gap50:.2e} < 3 SE {:.2e}; gap at 10 periods {gap10:.2e}",
            c.long.value,
            c.long.stderr,
            c.single.value,
            c.single.stderr,
            3.0 * se
        ),
        &[
            ("cost_50", c.long.value),
            ("stderr_50", c.long.stderr),
            ("cost_10", c.short.value),
            ("stderr_10", c.short.stderr),
            ("single_period", c.single.value),
            ("single_period_stderr", c.single.stderr),
            ("gap_50", gap50),
            ("gap_10", gap10),
            ("combined_stderr", se),
            ("k_burn", c.k_burn as f64),
        ],
    ))
}

fn a7(ctx: &mut Context) -> Result<Outcome> {
    let c = ctx.subject_costs()?;
    let v = c.value;
    let mc = c.single;
    let se_mc = combined(v.stderr, mc.stderr);
    let d_mc = v.value - mc.value;
    let mut passed = d_mc.abs() <= 3.0 * se_mc;
    let mut summary = format!("V = {:.6} +- {:.2e}; single-period cost {:.5} (diff {d_mc:.2e}, 3 SE {:.2e})", v.value, v.stderr, mc.value, 3.0 * se_mc);
    let mut metrics = vec![
        ("value", v.value),
        ("value_stderr", v.stderr),
        ("mc_cost", mc.value),
        ("mc_stderr", mc.stderr),
        ("diff_mc", d_mc),
    ];
    match stationary_chain_scalar(&ctx.subject) {
        Ok(chain) => {
            let d = v.value - chain.value;
            passed &= d.abs() <= 3.0 * v.stderr + 1e-9 * (1.0 + chain.value.abs());
            summary.push_str(&format!("; closed form {:.6} (diff {d:.2e})", chain.value));
            metrics.push(("closed_form", chain.value));
            metrics.push(("diff_closed_form", d));
        }
        Err(_) => summary.push_str("; no closed form for this scenario"),
    }
    Ok(Outcome::new(passed, summary, &metrics))
}

fn a8(ctx: &mut Context) -> Result<Outcome> {
    let costs = ctx.subject_costs()?;
    let set = ctx.subject.clone();
    let chain = ctx.chain(&set)?.clone();
    let n = ctx.opts.ergodic_paths;
    let setup = ScanSetup {
        burn: ctx.bundle(set.tau, costs.k_burn + 1, n, "a8-burn")?,
        fresh: ctx.bundle(set.tau, 1, n, "a8-fresh")?,
        stability: ctx.bundle(set.tau, 10, 2000, "a8-stability")?,
        x_start: Mat::zeros(set.n, 1),
        k_burn: costs.k_burn,
    };
    let table = optimality_scan(&set, &chain.riccati, &chain.eta, &default_perturbations(set.n, set.m), &setup)?;
    let v = costs.value.value;
    let above_v = table.rows.iter().all(|r| !r.stable || r.cost >= v - 3.0 * r.stderr);
    let kappa = table.kappa.map_or(f64::NAN, |k| k.value);
    let kappa_lo = table.kappa_ci95.map_or(f64::NAN, |c| c[0]);
    let at_zero = table.argmin_epsilon == Some(0.0);
    let passed = at_zero && table.kappa_positive() && above_v;
    let costs_txt: Vec<String> = table.rows.iter().map(|r| format!("{:+}: {:.5}", r.epsilon, r.cost)).collect();
    let mut metrics = vec![
        ("kappa", kappa),
        ("kappa_ci_low", kappa_lo),
        ("argmin_epsilon", table.argmin_epsilon.unwrap_or(f64::NAN)),
        ("all_above_value", f64::from(u8::from(above_v))),
    ];
    let keys: Vec<String> = table.rows.iter().map(|r| format!("cost_{:+}", r.epsilon)).collect();
    for (k, r) in keys.iter().zip(&table.rows) {
        metrics.push((k.as_str(), r.cost));
    }
    Ok(Outcome::new(
        passed,
        format!(
            "costs [{}], argmin {:?}, kappa {kappa:.4} (95% low {kappa_lo:.4}), all >= V - 3 SE {above_v}",
            costs_txt.join(", "),
            table.argmin_epsilon
        ),
        &metrics,
    ))
}

fn a9(ctx: &mut Context) -> Result<Outcome> {
    let mut passed = true;
    let mut parts = Vec::new();
    let mut metrics = Vec::new();
    for name in catalog_names() {
        let set = builtin_scenario(name)?;
        let stability = ctx.bundle(set.tau, 10, 2000, &format!("a9-stability-{name}"))?;
        let theta = match &set.stabilizer {
            Some(t) => t.clone(),
            None => find_stabilizer(&set, &stability)?.0,
        };
        let fb = FeedbackLaw::new("stabilizer", theta, CoefficientFn::zeros(set.m, 1));
        let x1 = Mat::zeros(set.n, 1);
        let mut x2 = x1;
        x2.set(0, 0, 1.0);
        let rep = contraction_check(&set, &fb, &x1, &x2, &ctx.bundle(set.tau, 10, 2000, &format!("a9-{name}"))?)?;
        let (slope, hi) = match &rep.fit {
            Some(f) => (f.slope_per_period(set.tau), -f.lambda_ci95[0] * set.tau),
            None => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        };
        let ok = rep.contracting && slope < 0.0 && hi < 0.0;
        passed &= ok;
        parts.push(format!("{name}: slope {slope:.3} (95% upper {hi:.3})"));
        metrics.push((format!("slope_{name}"), slope));
        metrics.push((format!("slope_ci_high_{name}"), hi));
    }
    let metrics: Vec<(&str, f64)> = metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(Outcome::new(passed, parts.join("; "), &metrics))
}

/// Directions `(ΔΘ, Δv, ε)` used by the completion-of-squares check.
pub fn completion_perturbations(n: usize, m: usize) -> [(Mat, Mat, f64); 3] {
    [
        (Mat::filled(m, n, 1.0), Mat::zeros(m, 1), 0.2),
        (Mat::zeros(m, n), Mat::filled(m, 1, 1.0), 0.3),
        (Mat::filled(m, n, -1.0), Mat::filled(m, 1, -1.0), 0.15),
    ]
}

fn a10(ctx: &mut Context) -> Result<Outcome> {
    let set = builtin_scenario("scalar-random-periodic")?;
    let chain = ctx.chain(&set)?.clone();
    let n = ctx.opts.ergodic_paths;
    let mut passed = true;
    let mut parts = Vec::new();
    let mut metrics = Vec::new();
    for (i, (dt, dv, eps)) in completion_perturbations(set.n, set.m).iter().enumerate() {
        let fb = chain.feedback.perturbed(dt, dv, *eps)?;
        let stability = stabilizer_check(&fb.theta, &set, &ctx.bundle(set.tau, 10, 2000, &format!("a10-stability-{i}"))?)?;
        let k_burn = suggested_k_burn(stability.lambda_hat, set.tau)?;
        let state = burn_in_state(&set, &fb, &ctx.bundle(set.tau, k_burn + 1, n, &format!("a10-burn-{i}"))?, &Mat::zeros(set.n, 1), k_burn)?;
        let rep = completion_of_square_check(&set, &fb, &chain.riccati, &chain.eta, &state, &ctx.bundle(set.tau, 1, n, &format!("a10-fresh-{i}"))?)?;
        let ok = rep.balanced(3.0) && rep.quadratic_nonnegative;
        passed &= ok;
        parts.push(format!(
            "#{i}: lhs {:.5}, rhs {:.5}, diff {:.2e} +- {:.2e}, min quadratic {:.2e}",
            rep.lhs.value, rep.rhs, rep.difference.value, rep.difference.stderr, rep.min_pathwise_quadratic
        ));
        metrics.push((format!("diff_{i}"), rep.difference.value));
        metrics.push((format!("diff_stderr_{i}"), rep.difference.stderr));
        metrics.push((format!("quadratic_{i}"), rep.quadratic.value));
        metrics.push((format!("min_quadratic_{i}"), rep.min_pathwise_quadratic));
    }
    let metrics: Vec<(&str, f64)> = metrics.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(Outcome::new(passed, parts.join("; "), &metrics))
}

fn run_one(ctx: &mut Context, id: Criterion) -> Result<Outcome> {
    match id {
        Criterion::A1 => a1(ctx),
        Criterion::A2 => a2(ctx),
        Criterion::A3 => riccati_criterion(ctx, "scalar-constant", 2f64.sqrt() - 1.0, 0.03, Some(10)),
        Criterion::A4 => riccati_criterion(ctx, "scalar-noisy-constant", (5f64.sqrt() - 1.0) / 2.0, 0.05, None),
        Criterion::A5 => a5(ctx),
        Criterion::A6 => a6(ctx),
        Criterion::A7 => a7(ctx),
        Criterion::A8 => a8(ctx),
        Criterion::A9 => a9(ctx),
        Criterion::A10 => a10(ctx),
    }
}

/// Runs `criteria` in order, calling `progress` after each one.
pub fn run_suite<F>(opts: &VerifyOptions, criteria: &[Criterion], progress: F) -> Result<SuiteReport>
where
    F: FnMut(&CriterionResult),
{
    let subject = resolve_scenario(&opts.scenario)?;
    run_suite_on(opts, subject, criteria, progress)
}

/// As [`run_suite`] with the subject scenario given as data.
pub fn run_suite_on<F>(opts: &VerifyOptions, subject: PeriodicCoefficientSet, criteria: &[Criterion], mut progress: F) -> Result<SuiteReport>
where
    F: FnMut(&CriterionResult),
{
    if opts.steps_per_period == 0 || opts.ergodic_paths < 2 || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("verify needs positive sizes and tolerance".into()));
    }
    let mut ctx = Context {
        opts: opts.clone(),
        subject,
        chains: BTreeMap::new(),
        subject_costs: None,
    };
    let start = Instant::now();
    let mut results = Vec::with_capacity(criteria.len());
    for &id in criteria {
        let t0 = Instant::now();
        let outcome = run_one(&mut ctx, id);
        let seconds = t0.elapsed().as_secs_f64();
        let limit = id.time_limit();
        let in_time = limit.is_none_or(|l| seconds < l);
        let res = match outcome {
            Ok(o) => CriterionResult {
                id,
                title: id.title().into(),
                passed: o.passed && in_time,
                summary: if in_time {
                    o.summary
                } else {
                    format!("{} (exceeded {:.0} s limit)", o.summary, limit.unwrap_or(0.0))
                },
                metrics: o.metrics,
                seconds,
                time_limit: limit,
                error: None,
            },
            Err(e) => CriterionResult {
                id,
                title: id.title().into(),
                passed: false,
                summary: format!("error: {e}"),
                metrics: BTreeMap::new(),
                seconds,
                time_limit: limit,
                error: Some(e.to_string()),
            },
        };
        progress(&res);
        results.push(res);
    }
    let seconds = start.elapsed().as_secs_f64();
    let passed = results.iter().all(|r| r.passed) && seconds < SUITE_TIME_LIMIT;
    Ok(SuiteReport {
        schema: SCHEMA.into(),
        version: crate::VERSION.into(),
        options: opts.clone(),
        criteria: results,
        seconds,
        time_limit: SUITE_TIME_LIMIT,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_labels_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(Criterion::parse(c.label()), Some(c));
        }
        assert_eq!(Criterion::parse("a10"), Some(Criterion::A10));
        assert_eq!(Criterion::parse("A11"), None);
    }

    #[test]
    fn unknown_subject_is_rejected() {
        let opts = VerifyOptions {
            scenario: "no-such-scenario".into(),
            ..VerifyOptions::default()
        };
        assert!(matches!(run_suite(&opts, &[Criterion::A3], |_| {}), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn riccati_criteria_pass() {
        let rep = run_suite(&VerifyOptions::default(), &[Criterion::A3, Criterion::A4, Criterion::A5], |_| {}).unwrap();
        for c in &rep.criteria {
            assert!(c.passed, "{}", c.line());
        }
        assert!(rep.passed);
        let json = serde_json::to_string(&rep).unwrap();
        let back: SuiteReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.criteria.len(), 3);
    }
}
