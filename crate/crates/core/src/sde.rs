//! Brownian bundles, Euler–Maruyama simulation of the fundamental solution and
//! of the closed-loop state, and Monte Carlo stability estimators.

use crate::coefficients::{point_at_node, FeedbackLaw, PathPoint, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::stats::{self, Estimate, Z95};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Paths whose state exceeds this magnitude are aborted.
pub const OVERFLOW_LIMIT: f64 = 1e12;

/// A seeded ensemble of Brownian increment sequences.
///
/// Increments are generated on demand from `(seed, path index)` with a
/// counter-based stream per path, so a bundle costs no memory until a caller
/// materialises it and any traversal order yields the same numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub tau: f64,
    pub steps_per_period: usize,
    pub n_periods: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Odd paths are the exact negation of the preceding even path.
    pub antithetic: bool,
}

impl PathBundle {
    pub fn new(
        tau: f64,
        steps_per_period: usize,
        n_periods: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<Self> {
        if steps_per_period == 0 || n_periods == 0 || n_paths == 0 {
            return Err(Error::InvalidArgument(format!(
                "bundle needs positive sizes (steps_per_period={steps_per_period}, n_periods={n_periods}, n_paths={n_paths})"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("period must be positive, got {tau}")));
        }
        Ok(PathBundle {
            tau,
            steps_per_period,
            n_periods,
            n_paths,
            seed,
            antithetic: false,
        })
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn dt(&self) -> f64 {
        self.tau / self.steps_per_period as f64
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_period * self.n_periods
    }

    /// Writes the increments of path `i` into `buf`.
    pub fn fill_path(&self, i: usize, buf: &mut Vec<f64>) {
        let steps = self.total_steps();
        buf.clear();
        buf.reserve(steps);
        let (stream, negate) = if self.antithetic {
            ((i / 2) as u64, i % 2 == 1)
        } else {
            (i as u64, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let sd = self.dt().sqrt();
        let sign = if negate { -1.0 } else { 1.0 };
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            buf.push(sign * sd * z);
        }
    }

    pub fn path(&self, i: usize) -> Vec<f64> {
        let mut buf = Vec::new();
        self.fill_path(i, &mut buf);
        buf
    }

    /// All increments, path-major.
    pub fn increments(&self) -> Vec<f64> {
        let steps = self.total_steps();
        let mut out = vec![0.0; steps * self.n_paths];
        out.par_chunks_mut(steps)
            .enumerate()
            .for_each_init(Vec::new, |buf, (i, chunk)| {
                self.fill_path(i, buf);
                chunk.copy_from_slice(buf);
            });
        out
    }

    /// Runs `f` on every path in parallel, collecting results in path order.
    pub fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[f64]) -> T + Sync + Send,
    {
        (0..self.n_paths)
            .into_par_iter()
            .map_init(Vec::new, |buf, i| {
                self.fill_path(i, buf);
                f(i, buf)
            })
            .collect()
    }

    /// Mean and standard error of one sample per path, treating antithetic
    /// pairs as single draws.
    pub fn estimate(&self, per_path: &[f64]) -> Estimate {
        debug_assert_eq!(per_path.len(), self.n_paths);
        if self.antithetic && per_path.len() >= 2 {
            let paired: Vec<f64> = per_path
                .chunks(2)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            let mut e = Estimate::from_samples(&paired);
            e.value = stats::mean(per_path);
            e
        } else {
            Estimate::from_samples(per_path)
        }
    }

    /// A bundle on an independent seed with otherwise identical sizes.
    pub fn reseeded(&self, seed: u64) -> Self {
        PathBundle { seed, ..*self }
    }
}

/// Independent sub-seed for a named stage of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then one SplitMix64 round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn simulate_brownian(
    tau: f64,
    steps_per_period: usize,
    n_periods: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    PathBundle::new(tau, steps_per_period, n_periods, n_paths, seed)
}

/// Visits grid nodes `start..end` of one path, passing the within-period
/// evaluation point and the increment leaving the node.
#[inline]
pub(crate) fn for_each_node<F>(incs: &[f64], spp: usize, dt: f64, start: usize, end: usize, mut f: F) -> std::result::Result<(), usize>
where
    F: FnMut(usize, &PathPoint, f64) -> bool,
{
    let mut period_start = start - start % spp;
    let mut sum: f64 = incs[period_start..start].iter().sum();
    for node in start..end {
        let j = node - period_start;
        if j == spp {
            period_start = node;
            sum = 0.0;
        }
        let j = node - period_start;
        let p = PathPoint::with_sum(j as f64 * dt, &incs[period_start..node], sum);
        let dw = incs[node];
        if !f(node, &p, dw) {
            return Err(node + 1);
        }
        sum += dw;
    }
    Ok(())
}

#[inline]
fn overflowed(m: &Mat) -> bool {
    !(m.max_abs() <= OVERFLOW_LIMIT)
}

/// One Euler–Maruyama step of the homogeneous system `dΦ = (A+BΘ)Φdt + CΦdW`.
#[inline]
pub(crate) fn fundamental_step(
    set: &PeriodicCoefficientSet,
    theta: Option<&FeedbackLaw>,
    p: &PathPoint,
    phi: &Mat,
    dt: f64,
    dw: f64,
) -> Mat {
    let mut a = set.a.at(p);
    if let Some(fb) = theta {
        a += set.b.at(p) * fb.theta.at(p);
    }
    let c = set.c.at(p);
    phi.axpy(dt, &(a * *phi)).axpy(dw, &(c * *phi))
}

/// One Euler–Maruyama step of the closed-loop state equation.
#[inline]
pub(crate) fn closed_loop_step(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    p: &PathPoint,
    x: &Mat,
    dt: f64,
    dw: f64,
) -> Mat {
    let b = set.b.at(p);
    let a = set.a.at(p) + b * fb.theta.at(p);
    let drift = a * *x + b * fb.v.at(p) + set.drift.at(p);
    let diffusion = set.c.at(p) * *x + set.sigma.at(p);
    x.axpy(dt, &drift).axpy(dw, &diffusion)
}

/// Closed-loop state along one increment sequence starting at a period
/// boundary; returns every node, or the first overflowing node.
pub fn simulate_path(
    set: &PeriodicCoefficientSet,
    fb: &FeedbackLaw,
    x0: Mat,
    incs: &[f64],
    steps_per_period: usize,
    dt: f64,
) -> std::result::Result<Vec<Mat>, usize> {
    let mut out = Vec::with_capacity(incs.len() + 1);
    let mut x = x0;
    out.push(x);
    for_each_node(incs, steps_per_period, dt, 0, incs.len(), |_, p, dw| {
        x = closed_loop_step(set, fb, p, &x, dt, dw);
        out.push(x);
        !overflowed(&x)
    })?;
    Ok(out)
}

/// Which grid nodes a simulation keeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Recording {
    All,
    PeriodEnds,
    Nodes(Vec<usize>),
}

impl Recording {
    fn nodes(&self, total_steps: usize, spp: usize) -> Vec<usize> {
        match self {
            Recording::All => (0..=total_steps).collect(),
            Recording::PeriodEnds => (0..=total_steps).step_by(spp).collect(),
            Recording::Nodes(v) => v.iter().copied().filter(|&n| n <= total_steps).collect(),
        }
    }
}

/// Per-path states at the recorded grid nodes.
#[derive(Debug, Clone)]
pub struct StateTrajectory {
    pub rows: usize,
    pub cols: usize,
    pub dt: f64,
    pub steps_per_period: usize,
    pub n_paths: usize,
    /// Recorded node indices, ascending.
    pub nodes: Vec<usize>,
    /// Path-major, then node, then row-major entries.
    values: Vec<f64>,
    /// First overflowing node of each path, if any.
    pub overflow: Vec<Option<usize>>,
    /// Present when the bundle was antithetic; used for paired errors.
    pub antithetic: bool,
}

impl StateTrajectory {
    fn stride(&self) -> usize {
        self.rows * self.cols
    }

    pub fn value(&self, path: usize, k: usize) -> Mat {
        let s = self.stride();
        let off = (path * self.nodes.len() + k) * s;
        let mut m = Mat::zeros(self.rows, self.cols);
        for e in 0..s {
            m.set_flat(e, self.values[off + e]);
        }
        m
    }

    pub fn time(&self, k: usize) -> f64 {
        self.nodes[k] as f64 * self.dt
    }

    pub fn overflow_count(&self) -> usize {
        self.overflow.iter().filter(|o| o.is_some()).count()
    }

    pub fn first_overflow(&self) -> Option<(usize, usize)> {
        self.overflow
            .iter()
            .enumerate()
            .filter_map(|(p, o)| o.map(|n| (p, n)))
            .min_by_key(|&(_, n)| n)
    }

    pub fn check_overflow(&self) -> Result<()> {
        match self.first_overflow() {
            Some((path, node)) => Err(Error::Overflow { path, node }),
            None => Ok(()),
        }
    }

    fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_paths).filter(|&p| self.overflow[p].is_none())
    }

    /// Mean of `|state|²_F` at recorded node `k` with its standard error,
    /// over non-overflowing paths.
    pub fn second_moment(&self, k: usize) -> Estimate {
        let xs: Vec<f64> = self.alive().map(|p| self.value(p, k).frobenius().powi(2)).collect();
        self.paired(&xs)
    }

    fn paired(&self, xs: &[f64]) -> Estimate {
        if self.antithetic && self.overflow_count() == 0 {
            let b = PathBundle {
                tau: 1.0,
                steps_per_period: 1,
                n_periods: 1,
                n_paths: xs.len(),
                seed: 0,
                antithetic: true,
            };
            b.estimate(xs)
        } else {
            Estimate::from_samples(xs)
        }
    }

    pub fn moment_rows(&self) -> Vec<MomentRow> {
        (0..self.nodes.len())
            .map(|k| {
                let first: Vec<f64> = self.alive().map(|p| self.value(p, k).flat(0)).collect();
                let m2 = self.second_moment(k);
                MomentRow {
                    t: self.time(k),
                    mean: stats::mean(&first),
                    second_moment: m2.value,
                    stderr: m2.stderr,
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path_id,node_index,t")?;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.cols == 1 {
                    write!(w, ",x{i}")?;
                } else {
                    write!(w, ",x{i}{j}")?;
                }
            }
        }
        writeln!(w)?;
        for p in 0..self.n_paths {
            for (k, &node) in self.nodes.iter().enumerate() {
                if matches!(self.overflow[p], Some(o) if node >= o) {
                    break;
                }
                write!(w, "{p},{node},{}", self.time(k))?;
                for v in self.value(p, k).entries() {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub mean: f64,
    pub second_moment: f64,
    pub stderr: f64,
}

pub fn write_moments_csv<W: Write>(rows: &[MomentRow], mut w: W) -> Result<()> {
    writeln!(w, "t,mean,second_moment,stderr")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.t, r.mean, r.second_moment, r.stderr)?;
    }
    Ok(())
}

fn collect_trajectory(
    rows: usize,
    cols: usize,
    bundle: &PathBundle,
    nodes: Vec<usize>,
    per_path: Vec<(Vec<f64>, Option<usize>)>,
) -> StateTrajectory {
    let mut values = Vec::with_capacity(per_path.len() * nodes.len() * rows * cols);
    let mut overflow = Vec::with_capacity(per_path.len());
    for (v, o) in per_path {
        values.extend_from_slice(&v);
        overflow.push(o);
    }
    StateTrajectory {
        rows,
        cols,
        dt: bundle.dt(),
        steps_per_period: bundle.steps_per_period,
        n_paths: bundle.n_paths,
        nodes,
        values,
        overflow,
        antithetic: bundle.antithetic,
    }
}

/// Runs a per-path recursion and records the chosen nodes. Entries after an
/// overflow are filled with NaN.
fn record<F>(
    bundle: &PathBundle,
    recording: &Recording,
    init: Mat,
    step: F,
) -> StateTrajectory
where
    F: Fn(&PathPoint, &Mat, f64, f64) -> Mat + Sync + Send,
{
    let spp = bundle.steps_per_period;
    let total = bundle.total_steps();
    let dt = bundle.dt();
    let nodes = recording.nodes(total, spp);
    let stride = init.len();
    let per_path = bundle.map_paths(|_, incs| {
        let mut out = vec![f64::NAN; nodes.len() * stride];
        let mut next = 0;
        let mut x = init;
        let mut push = |node: usize, x: &Mat, next: &mut usize| {
            while *next < nodes.len() && nodes[*next] == node {
                for e in 0..stride {
                    out[*next * stride + e] = x.flat(e);
                }
                *next += 1;
            }
        };
        push(0, &x, &mut next);
        let res = for_each_node(incs, spp, dt, 0, total, |node, p, dw| {
            x = step(p, &x, dt, dw);
            push(node + 1, &x, &mut next);
            !overflowed(&x)
        });
        (out, res.err())
    });
    collect_trajectory(init.rows(), init.cols(), bundle, nodes, per_path)
}

fn check_feedback(set: &PeriodicCoefficientSet, fb: Option<&FeedbackLaw>) -> Result<()> {
    if let Some(f) = fb {
        f.check_dims(set.n, set.m)?;
    }
    Ok(())
}

/// Euler–Maruyama for `Φ` with `Φ_0 = I`; with a feedback, `A` becomes `A + BΘ`.
pub fn simulate_fundamental(
    set: &PeriodicCoefficientSet,
    feedback: Option<&FeedbackLaw>,
    bundle: &PathBundle,
    recording: &Recording,
) -> Result<StateTrajectory> {
    check_feedback(set, feedback)?;
    Ok(record(bundle, recording, Mat::identity(set.n), |p, phi, dt, dw| {
        fundamental_step(set, feedback, p, phi, dt, dw)
    }))
}

/// Initial condition of a closed-loop simulation.
#[derive(Debug, Clone)]
pub enum InitialState {
    Fixed(Mat),
    PerPath(Vec<Mat>),
}

/// Euler–Maruyama for `dX = ((A+BΘ)X + Bv + b)dt + (CX + σ)dW`.
pub fn simulate_closed_loop(
    set: &PeriodicCoefficientSet,
    feedback: &FeedbackLaw,
    x0: &InitialState,
    bundle: &PathBundle,
    recording: &Recording,
) -> Result<StateTrajectory> {
    check_feedback(set, Some(feedback))?;
    let check = |x: &Mat| -> Result<()> {
        if x.shape() != (set.n, 1) {
            return Err(Error::ShapeMismatch {
                what: "initial state".into(),
                expected: (set.n, 1),
                actual: x.shape(),
            });
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument("initial state is not finite".into()));
        }
        Ok(())
    };
    match x0 {
        InitialState::Fixed(x) => {
            check(x)?;
            let x = *x;
            Ok(record(bundle, recording, x, |p, s, dt, dw| {
                closed_loop_step(set, feedback, p, s, dt, dw)
            }))
        }
        InitialState::PerPath(xs) => {
            if xs.len() != bundle.n_paths {
                return Err(Error::InvalidArgument(format!(
                    "{} initial states for {} paths",
                    xs.len(),
                    bundle.n_paths
                )));
            }
            for x in xs {
                check(x)?;
            }
            let spp = bundle.steps_per_period;
            let total = bundle.total_steps();
            let dt = bundle.dt();
            let nodes = recording.nodes(total, spp);
            let n = set.n;
            let per_path = bundle.map_paths(|i, incs| {
                let mut out = vec![f64::NAN; nodes.len() * n];
                match simulate_path(set, feedback, xs[i], incs, spp, dt) {
                    Ok(states) => {
                        for (k, &node) in nodes.iter().enumerate() {
                            for e in 0..n {
                                out[k * n + e] = states[node].flat(e);
                            }
                        }
                        (out, None)
                    }
                    Err(o) => (out, Some(o)),
                }
            });
            Ok(collect_trajectory(n, 1, bundle, nodes, per_path))
        }
    }
}

/// Log-linear fit of a second moment `E|·|² ≈ βe^{−λt}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub beta_hat: f64,
    pub lambda_hat: f64,
    /// Standard error of `lambda_hat` (delta method over paths).
    pub lambda_stderr: f64,
    pub lambda_ci95: [f64; 2],
    pub r_squared: f64,
    pub n_points: usize,
    pub n_overflow: usize,
}

impl DecayFit {
    /// `λ̂ > 0` at 95% confidence with no overflowing path.
    pub fn is_decaying(&self) -> bool {
        self.n_overflow == 0 && self.lambda_ci95[0] > 0.0
    }

    /// Fitted log-moment slope per period of length `tau`.
    pub fn slope_per_period(&self, tau: f64) -> f64 {
        -self.lambda_hat * tau
    }
}

/// Fits `log m_k` against `t_k` where `m_k` is the mean over paths of
/// `sq[path][k]`. The slope error comes from the per-path influence function
/// so correlation between nodes on one path is accounted for.
pub(crate) fn fit_log_moments(times: &[f64], sq: &[Vec<f64>], antithetic: bool, n_overflow: usize) -> Result<DecayFit> {
    let k = times.len();
    if k < 3 {
        return Err(Error::InvalidArgument(format!("decay fit needs at least 3 period-end nodes, got {k}")));
    }
    if sq.is_empty() {
        return Err(Error::Degenerate("no surviving paths".into()));
    }
    let n = sq.len() as f64;
    let mut m = vec![0.0; k];
    for row in sq {
        for (j, v) in row.iter().enumerate() {
            m[j] += v / n;
        }
    }
    if let Some(j) = m.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Degenerate(format!("non-positive second moment {} at t = {}", m[j], times[j])));
    }
    let logs: Vec<f64> = m.iter().map(|v| v.ln()).collect();
    let (intercept, slope, r2) = stats::simple_ols(times, &logs);
    let w = stats::ols_slope_weights(times);
    let influence: Vec<f64> = sq
        .iter()
        .map(|row| row.iter().enumerate().map(|(j, v)| w[j] * (v - m[j]) / m[j]).sum())
        .collect();
    let se = if antithetic && n_overflow == 0 {
        let paired: Vec<f64> = influence.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        Estimate::from_samples(&paired).stderr
    } else {
        Estimate::from_samples(&influence).stderr
    };
    let lambda = -slope;
    Ok(DecayFit {
        beta_hat: intercept.exp(),
        lambda_hat: lambda,
        lambda_stderr: se,
        lambda_ci95: [lambda - Z95 * se, lambda + Z95 * se],
        r_squared: r2,
        n_points: k,
        n_overflow,
    })
}

/// Stability summary of a homogeneous system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub beta_hat: f64,
    pub lambda_hat: f64,
    pub lambda_stderr: f64,
    pub lambda_ci95: [f64; 2],
    pub r_squared: f64,
    pub delta_hat: Option<f64>,
    pub n_overflow: usize,
    pub stable: bool,
}

impl From<DecayFit> for StabilityReport {
    fn from(f: DecayFit) -> Self {
        StabilityReport {
            beta_hat: f.beta_hat,
            lambda_hat: f.lambda_hat,
            lambda_stderr: f.lambda_stderr,
            lambda_ci95: f.lambda_ci95,
            r_squared: f.r_squared,
            delta_hat: None,
            n_overflow: f.n_overflow,
            stable: f.is_decaying(),
        }
    }
}

/// Fits `log E|state|²` over the recorded period-end nodes.
pub fn estimate_second_moment_decay(traj: &StateTrajectory) -> Result<StabilityReport> {
    let ks: Vec<usize> = (0..traj.nodes.len())
        .filter(|&k| traj.nodes[k].is_multiple_of(traj.steps_per_period))
        .collect();
    if ks.len() < 4 {
        return Err(Error::InvalidArgument("trajectory must span at least 3 periods".into()));
    }
    let times: Vec<f64> = ks.iter().map(|&k| traj.time(k)).collect();
    let sq: Vec<Vec<f64>> = traj
        .alive()
        .map(|p| ks.iter().map(|&k| traj.value(p, k).frobenius().powi(2)).collect())
        .collect();
    let fit = fit_log_moments(&times, &sq, traj.antithetic, traj.overflow_count())?;
    Ok(fit.into())
}

/// Conditional Gram lower-bound estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramBound {
    pub delta_hat: f64,
    /// Smallest eigenvalue before clipping at zero.
    pub raw_min_eigenvalue: f64,
    /// Per start phase: smallest eigenvalue of the fitted conditional Gram.
    pub per_phase: Vec<(f64, f64)>,
    /// `β̂ e^{−λ̂ (T_max − r)} / λ̂` at the latest start phase.
    pub tail_bound: f64,
    pub fit: StabilityReport,
    pub warnings: Vec<String>,
}

const GRAM_RIDGE: f64 = 1e-8;

/// Estimates `δ` in `E(∫_r^T (Φ_sΦ_r⁻¹)ᵀ Φ_sΦ_r⁻¹ ds | F_r) ≥ δ I`.
///
/// For each start phase the pathwise integral is regressed on
/// `{1, S_r, S_r²}` (`S_r` the within-period partial sum at `r`) and the
/// fitted matrix is evaluated on the 1%..99% range of `S_r`.
pub fn estimate_gram_lower_bound(
    set: &PeriodicCoefficientSet,
    feedback: Option<&FeedbackLaw>,
    bundle: &PathBundle,
    r_grid: &[f64],
    t_max: f64,
) -> Result<GramBound> {
    check_feedback(set, feedback)?;
    let spp = bundle.steps_per_period;
    let dt = bundle.dt();
    let end = (t_max / dt).round() as usize;
    if end > bundle.total_steps() {
        return Err(Error::InvalidArgument(format!(
            "T_max = {t_max} exceeds the bundle horizon {}",
            bundle.total_steps() as f64 * dt
        )));
    }
    let n = set.n;
    let traj = simulate_fundamental(set, feedback, bundle, &Recording::PeriodEnds)?;
    let fit = estimate_second_moment_decay(&traj)?;
    let mut warnings = Vec::new();
    let mut per_phase = Vec::new();
    let mut raw_min = f64::INFINITY;
    let mut tail: f64 = 0.0;
    for &r in r_grid {
        if !(0.0..bundle.tau).contains(&r) {
            return Err(Error::PhaseOutOfRange { phase: r, tau: bundle.tau });
        }
        let r_node = (r / dt).round() as usize;
        if r_node >= end {
            return Err(Error::InvalidArgument(format!("T_max = {t_max} does not exceed r = {r}")));
        }
        let samples: Vec<Option<(f64, Mat)>> = bundle.map_paths(|_, incs| {
            let mut psi = Mat::identity(n);
            let s_r: f64 = incs[r_node - r_node % spp..r_node].iter().sum();
            let mut integral = (psi.transpose() * psi).scale(0.5 * dt);
            let ok = for_each_node(incs, spp, dt, r_node, end, |node, p, dw| {
                psi = fundamental_step(set, feedback, p, &psi, dt, dw);
                let w = if node + 1 == end { 0.5 } else { 1.0 };
                integral = integral.axpy(w * dt, &(psi.transpose() * psi));
                !overflowed(&psi)
            });
            ok.ok().map(|_| (s_r, integral))
        });
        let pts: Vec<(f64, Mat)> = samples.into_iter().flatten().collect();
        if pts.len() < 10 {
            return Err(Error::Degenerate("too few surviving paths for the Gram regression".into()));
        }
        let degree = if r_node.is_multiple_of(spp) { 0 } else { 2 };
        let fitted = regress_matrix_poly(&pts, degree, GRAM_RIDGE, r_node)?;
        let mut s_sorted: Vec<f64> = pts.iter().map(|(s, _)| *s).collect();
        s_sorted.sort_by(f64::total_cmp);
        let lo = s_sorted[(0.01 * (s_sorted.len() - 1) as f64) as usize];
        let hi = s_sorted[(0.99 * (s_sorted.len() - 1) as f64) as usize];
        let mut worst = f64::INFINITY;
        for i in 0..=20 {
            let s = lo + (hi - lo) * i as f64 / 20.0;
            worst = worst.min(eval_matrix_poly(&fitted, s).symmetrize().min_eigenvalue());
        }
        per_phase.push((r, worst));
        raw_min = raw_min.min(worst);
        let horizon = t_max - r_node as f64 * dt;
        if fit.lambda_hat > 0.0 {
            tail = tail.max(fit.beta_hat * (-fit.lambda_hat * horizon).exp() / fit.lambda_hat);
        }
        if fit.lambda_hat > 0.0 && horizon < 10.0 / fit.lambda_hat {
            warnings.push(format!(
                "T_max - r = {horizon:.3} is below 10/lambda_hat = {:.3}",
                10.0 / fit.lambda_hat
            ));
        }
    }
    let mut report = fit;
    report.delta_hat = Some(raw_min.max(0.0));
    Ok(GramBound {
        delta_hat: raw_min.max(0.0),
        raw_min_eigenvalue: raw_min,
        per_phase,
        tail_bound: tail,
        fit: report,
        warnings,
    })
}

/// Least-squares fit of matrix samples on `{1, s, .., s^degree}`; returns
/// one coefficient matrix per power.
pub(crate) fn regress_matrix_poly(pts: &[(f64, Mat)], degree: usize, ridge: f64, node: usize) -> Result<Vec<Mat>> {
    let (rows, cols) = pts[0].1.shape();
    if degree == 0 {
        let mut mean = Mat::zeros(rows, cols);
        for (_, m) in pts {
            mean = mean.axpy(1.0 / pts.len() as f64, m);
        }
        return Ok(vec![mean]);
    }
    let scale = {
        let v = pts.iter().map(|(s, _)| s * s).sum::<f64>() / pts.len() as f64;
        if v > 0.0 { v.sqrt() } else { 1.0 }
    };
    let p = degree + 1;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut rhs = nalgebra::DMatrix::<f64>::zeros(p, rows * cols);
    let mut phi = vec![0.0; p];
    for (s, m) in pts {
        let z = s / scale;
        phi[0] = 1.0;
        for j in 1..p {
            phi[j] = phi[j - 1] * z;
        }
        for a in 0..p {
            for b in 0..p {
                gram[(a, b)] += phi[a] * phi[b];
            }
            for e in 0..rows * cols {
                rhs[(a, e)] += phi[a] * m.flat(e);
            }
        }
    }
    let n = pts.len() as f64;
    gram /= n;
    rhs /= n;
    // The intercept is left unpenalised so constant targets are reproduced.
    for a in 1..p {
        gram[(a, a)] += ridge;
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = emax / emin;
    if !(cond < 1e12) {
        return Err(Error::IllConditioned { node, condition: cond });
    }
    let chol = gram.cholesky().ok_or(Error::IllConditioned { node, condition: cond })?;
    let sol = chol.solve(&rhs);
    let mut out = Vec::with_capacity(p);
    for a in 0..p {
        let mut m = Mat::zeros(rows, cols);
        for e in 0..rows * cols {
            m.set_flat(e, sol[(a, e)] / scale.powi(a as i32));
        }
        out.push(m);
    }
    Ok(out)
}

pub(crate) fn eval_matrix_poly(coeffs: &[Mat], s: f64) -> Mat {
    let mut acc = coeffs[coeffs.len() - 1];
    for c in coeffs.iter().rev().skip(1) {
        acc = c.axpy(1.0, &acc.scale(s));
    }
    acc
}

/// Outcome of running two closed-loop solutions on shared increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `E|X¹ − X²|²` at each period end.
    pub difference_moments: Vec<f64>,
    pub fit: Option<DecayFit>,
    /// Fitted log-moment slope per period.
    pub slope_per_period: Option<f64>,
    pub contracting: bool,
}

/// Pathwise difference `X¹ − X²` at period ends. It solves the homogeneous
/// equation, so it is propagated directly and depends on neither `b`, `σ` nor `v`.
pub fn difference_trajectory(
    set: &PeriodicCoefficientSet,
    feedback: &FeedbackLaw,
    x1: &Mat,
    x2: &Mat,
    bundle: &PathBundle,
    recording: &Recording,
) -> Result<StateTrajectory> {
    check_feedback(set, Some(feedback))?;
    let d0 = *x1 - *x2;
    Ok(record(bundle, recording, d0, |p, d, dt, dw| {
        fundamental_step(set, Some(feedback), p, d, dt, dw)
    }))
}

/// Fits `log E|X¹_{kτ} − X²_{kτ}|²` against `kτ`.
pub fn contraction_check(
    set: &PeriodicCoefficientSet,
    feedback: &FeedbackLaw,
    x1: &Mat,
    x2: &Mat,
    bundle: &PathBundle,
) -> Result<ContractionReport> {
    let traj = difference_trajectory(set, feedback, x1, x2, bundle, &Recording::PeriodEnds)?;
    let moments: Vec<f64> = (0..traj.nodes.len()).map(|k| traj.second_moment(k).value).collect();
    if moments.iter().all(|&m| m == 0.0) {
        return Ok(ContractionReport {
            difference_moments: moments,
            fit: None,
            slope_per_period: None,
            contracting: true,
        });
    }
    let rep = estimate_second_moment_decay(&traj)?;
    let fit = DecayFit {
        beta_hat: rep.beta_hat,
        lambda_hat: rep.lambda_hat,
        lambda_stderr: rep.lambda_stderr,
        lambda_ci95: rep.lambda_ci95,
        r_squared: rep.r_squared,
        n_points: traj.nodes.len(),
        n_overflow: rep.n_overflow,
    };
    Ok(ContractionReport {
        difference_moments: moments,
        slope_per_period: Some(fit.slope_per_period(bundle.tau)),
        contracting: fit.is_decaying(),
        fit: Some(fit),
    })
}

/// Within-period point at absolute node `node` of a path (re-exported for
/// the other engines).
pub fn node_point(path: &[f64], node: usize, steps_per_period: usize, dt: f64) -> PathPoint<'_> {
    point_at_node(path, node, steps_per_period, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{builtin_scenario, CoefficientFn};

    fn scalar(a: f64, c: f64) -> PeriodicCoefficientSet {
        PeriodicCoefficientSet::new(
            "t",
            1.0,
            CoefficientFn::scalar(a),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
        )
        .unwrap()
        .with_noise(CoefficientFn::scalar(c), CoefficientFn::scalar(0.0))
        .unwrap()
    }

    #[test]
    fn bundle_rejects_zero_sizes() {
        assert!(PathBundle::new(1.0, 0, 1, 1, 0).is_err());
        assert!(PathBundle::new(1.0, 4, 1, 0, 0).is_err());
    }

    #[test]
    fn increment_variance_matches_dt() {
        let b = PathBundle::new(1.0, 4, 1, 100_000, 3).unwrap();
        let incs = b.increments();
        for j in 0..4 {
            let xs: Vec<f64> = (0..b.n_paths).map(|p| incs[p * 4 + j] * incs[p * 4 + j]).collect();
            let e = Estimate::from_samples(&xs);
            assert!((e.value - 0.25).abs() < 4.0 * e.stderr, "{e:?}");
        }
    }

    #[test]
    fn bundle_is_order_independent() {
        let b = PathBundle::new(1.0, 8, 2, 64, 11).unwrap();
        let all = b.increments();
        for i in (0..64).rev() {
            assert_eq!(&all[i * 16..(i + 1) * 16], &b.path(i)[..]);
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let again = pool.install(|| b.increments());
        assert_eq!(all, again);
    }

    #[test]
    fn antithetic_pairs_cancel() {
        let b = PathBundle::new(1.0, 8, 1, 10, 5).unwrap().with_antithetic(true);
        for i in (0..10).step_by(2) {
            let p = b.path(i);
            let q = b.path(i + 1);
            for (x, y) in p.iter().zip(&q) {
                assert_eq!(x + y, 0.0);
            }
        }
    }

    #[test]
    fn fundamental_starts_at_identity_and_stays_there_without_dynamics() {
        let set = builtin_scenario("planar-deterministic-periodic").unwrap();
        let b = PathBundle::new(1.0, 16, 2, 8, 1).unwrap();
        let t = simulate_fundamental(&set, None, &b, &Recording::All).unwrap();
        for p in 0..8 {
            assert_eq!(t.value(p, 0), Mat::identity(2));
        }
        assert_eq!(t.nodes.len(), b.total_steps() + 1);
        let mut zero = set.clone();
        zero.a = CoefficientFn::zeros(2, 2);
        zero.c = CoefficientFn::zeros(2, 2);
        let t = simulate_fundamental(&zero, None, &b, &Recording::All).unwrap();
        for p in 0..8 {
            for k in 0..t.nodes.len() {
                assert_eq!(t.value(p, k), Mat::identity(2));
            }
        }
    }

    #[test]
    fn scalar_fundamental_matches_exponential() {
        let b = PathBundle::new(1.0, 64, 1, 4, 1).unwrap();
        let t = simulate_fundamental(&scalar(-1.0, 0.0), None, &b, &Recording::PeriodEnds).unwrap();
        let v = t.value(0, 1).get(0, 0);
        assert!((v - (-1.0f64).exp()).abs() < 1.0 / 64.0);
    }

    #[test]
    fn zero_state_is_invariant() {
        let set = scalar(-1.0, 0.7);
        let fb = FeedbackLaw::zero(1, 1);
        let b = PathBundle::new(1.0, 16, 3, 5, 2).unwrap();
        let t = simulate_closed_loop(&set, &fb, &InitialState::Fixed(Mat::zeros(1, 1)), &b, &Recording::All).unwrap();
        for p in 0..5 {
            for k in 0..t.nodes.len() {
                assert_eq!(t.value(p, k).get(0, 0), 0.0);
            }
        }
    }

    #[test]
    fn deterministic_relaxation_to_one() {
        let set = scalar(-1.0, 0.0).with_drift(CoefficientFn::scalar(1.0)).unwrap();
        let fb = FeedbackLaw::zero(1, 1);
        let b = PathBundle::new(1.0, 64, 10, 2, 2).unwrap();
        let t = simulate_closed_loop(&set, &fb, &InitialState::Fixed(Mat::zeros(1, 1)), &b, &Recording::PeriodEnds).unwrap();
        let x10 = t.value(0, 10).get(0, 0);
        assert!((x10 - 1.0).abs() < 1e-3, "{x10}");
    }

    #[test]
    fn pasting_is_bit_identical() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let fb = FeedbackLaw::constant_gain("k", Mat::scalar(-0.3));
        let b = PathBundle::new(1.0, 32, 2, 1, 9).unwrap();
        let incs = b.path(0);
        let full = simulate_path(&set, &fb, Mat::scalar(0.4), &incs, 32, b.dt()).unwrap();
        let first = simulate_path(&set, &fb, Mat::scalar(0.4), &incs[..32], 32, b.dt()).unwrap();
        let shifted = crate::coefficients::theta_shift(&incs, 1, 32).unwrap();
        let second = simulate_path(&set, &fb, first[32], shifted, 32, b.dt()).unwrap();
        assert_eq!(full[64].get(0, 0).to_bits(), second[32].get(0, 0).to_bits());
        assert_eq!(full[32], first[32]);
    }

    #[test]
    fn shift_covariance_of_fundamental() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let b = PathBundle::new(1.0, 16, 3, 1, 4).unwrap();
        let incs = b.path(0);
        let dt = b.dt();
        let mut full = vec![Mat::identity(1)];
        for_each_node(&incs, 16, dt, 0, 48, |_, p, dw| {
            let n = fundamental_step(&set, None, p, full.last().unwrap(), dt, dw);
            full.push(n);
            true
        })
        .unwrap();
        let shifted = crate::coefficients::theta_shift(&incs, 2, 16).unwrap();
        let mut phi = Mat::identity(1);
        for_each_node(shifted, 16, dt, 0, 16, |node, p, dw| {
            phi = fundamental_step(&set, None, p, &phi, dt, dw);
            let expect = full[32 + node + 1].get(0, 0) / full[32].get(0, 0);
            assert!((phi.get(0, 0) - expect).abs() <= 1e-10 * expect.abs());
            true
        })
        .unwrap();
    }

    #[test]
    fn superposition_in_offset() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let b = PathBundle::new(1.0, 16, 2, 1, 4).unwrap();
        let incs = b.path(0);
        let th = CoefficientFn::scalar(-0.2);
        let v1 = FeedbackLaw::new("1", th.clone(), CoefficientFn::scalar(0.3));
        let v12 = FeedbackLaw::new("12", th.clone(), CoefficientFn::scalar(0.3 + 0.5));
        let mut homog = set.clone();
        homog.drift = CoefficientFn::zeros(1, 1);
        homog.sigma = CoefficientFn::zeros(1, 1);
        let v2 = FeedbackLaw::new("2", th, CoefficientFn::scalar(0.5));
        let x0 = Mat::scalar(0.7);
        let a = simulate_path(&set, &v12, x0, &incs, 16, b.dt()).unwrap();
        let p = simulate_path(&set, &v1, x0, &incs, 16, b.dt()).unwrap();
        let q = simulate_path(&homog, &v2, Mat::scalar(0.0), &incs, 16, b.dt()).unwrap();
        for k in 0..a.len() {
            let lhs = a[k].get(0, 0);
            let rhs = p[k].get(0, 0) + q[k].get(0, 0);
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn decay_rate_scalar_cases() {
        let b = PathBundle::new(1.0, 64, 4, 2000, 5).unwrap();
        let t = simulate_fundamental(&scalar(-1.0, 0.0), None, &b, &Recording::PeriodEnds).unwrap();
        assert_eq!(t.second_moment(0).value, 1.0);
        let rep = estimate_second_moment_decay(&t).unwrap();
        // Euler rate −128·ln(1 − 1/64); deterministic, so zero error.
        let disc = -128.0 * (1.0f64 - 1.0 / 64.0).ln();
        assert!((rep.lambda_hat - disc).abs() < 1e-9);
        assert!((rep.lambda_hat - 2.0).abs() < 0.02);

        let b = PathBundle::new(1.0, 64, 4, 20_000, 5).unwrap();
        let t = simulate_fundamental(&scalar(-1.0, 1.0), None, &b, &Recording::PeriodEnds).unwrap();
        let rep = estimate_second_moment_decay(&t).unwrap();
        assert!((rep.lambda_hat - 1.0).abs() < 3.0 * rep.lambda_stderr + 0.02, "{rep:?}");
        assert!(rep.stable);
    }

    #[test]
    fn unstable_closed_loop_is_flagged() {
        let set = scalar(-1.0, 0.0);
        let fb = FeedbackLaw::constant_gain("up", Mat::scalar(2.0));
        let b = PathBundle::new(1.0, 32, 4, 10, 1).unwrap();
        let t = simulate_fundamental(&set, Some(&fb), &b, &Recording::PeriodEnds).unwrap();
        let rep = estimate_second_moment_decay(&t).unwrap();
        assert!(!rep.stable && rep.lambda_hat < 0.0);
    }

    #[test]
    fn overflow_is_reported() {
        let set = scalar(40.0, 0.0);
        let b = PathBundle::new(1.0, 8, 4, 2, 1).unwrap();
        let t = simulate_fundamental(&set, None, &b, &Recording::PeriodEnds).unwrap();
        assert_eq!(t.overflow_count(), 2);
        assert!(matches!(t.check_overflow(), Err(Error::Overflow { .. })));
    }

    #[test]
    fn gram_bound_scalar_cases() {
        let b = PathBundle::new(1.0, 64, 6, 500, 2).unwrap();
        let g = estimate_gram_lower_bound(&scalar(-1.0, 0.0), None, &b, &[0.0, 0.5], 5.0).unwrap();
        assert!((g.delta_hat - 0.5).abs() < 0.02, "{g:?}");
        assert!(g.tail_bound < 1e-3);

        let b = PathBundle::new(1.0, 64, 12, 4000, 2).unwrap();
        let g = estimate_gram_lower_bound(&scalar(-1.0, 1.0), None, &b, &[0.0], 12.0).unwrap();
        assert!((g.delta_hat - 1.0).abs() < 0.06, "{g:?}");
    }

    #[test]
    fn contraction_difference_properties() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let fb = FeedbackLaw::zero(1, 1);
        let b = PathBundle::new(1.0, 32, 5, 200, 8).unwrap();
        let same = contraction_check(&set, &fb, &Mat::scalar(1.0), &Mat::scalar(1.0), &b).unwrap();
        assert!(same.difference_moments.iter().all(|&m| m == 0.0));

        let x1 = Mat::scalar(2.0);
        let x2 = Mat::scalar(-1.0);
        let d = difference_trajectory(&set, &fb, &x1, &x2, &b, &Recording::All).unwrap();
        let mut other = set.clone();
        other.drift = CoefficientFn::scalar(-3.0);
        other.sigma = CoefficientFn::scalar(0.1);
        let fb2 = FeedbackLaw::new("v", CoefficientFn::scalar(0.0), CoefficientFn::scalar(4.0));
        let d2 = difference_trajectory(&other, &fb2, &x1, &x2, &b, &Recording::All).unwrap();
        let t1 = simulate_closed_loop(&set, &fb, &InitialState::Fixed(x1), &b, &Recording::All).unwrap();
        let t2 = simulate_closed_loop(&set, &fb, &InitialState::Fixed(x2), &b, &Recording::All).unwrap();
        for p in 0..b.n_paths {
            for k in 0..d.nodes.len() {
                let v = d.value(p, k).get(0, 0);
                assert_eq!(v.to_bits(), d2.value(p, k).get(0, 0).to_bits());
                let direct = t1.value(p, k).get(0, 0) - t2.value(p, k).get(0, 0);
                assert!((v - direct).abs() < 1e-10);
            }
        }

        let c = contraction_check(&scalar(-1.0, 0.0), &fb, &x1, &x2, &b).unwrap();
        let disc = 128.0 * (1.0f64 - 1.0 / 32.0).ln() * 32.0 / 64.0;
        assert!((c.slope_per_period.unwrap() - disc).abs() < 1e-9);
        assert!((c.slope_per_period.unwrap() + 2.0).abs() < 0.07);
        assert!(c.contracting);
    }

    #[test]
    fn csv_exports_have_headers() {
        let set = scalar(-1.0, 0.3);
        let b = PathBundle::new(1.0, 4, 1, 2, 1).unwrap();
        let t = simulate_fundamental(&set, None, &b, &Recording::All).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("path_id,node_index,t,x0\n"));
        assert_eq!(s.lines().count(), 1 + 2 * 5);
        let mut buf = Vec::new();
        write_moments_csv(&t.moment_rows(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,mean,second_moment,stderr\n"));
    }

    #[test]
    fn matrix_poly_regression_recovers_quadratic() {
        let pts: Vec<(f64, Mat)> = (0..50)
            .map(|i| {
                let s = -1.0 + i as f64 * 0.04;
                (s, Mat::scalar(1.0 + 2.0 * s - 0.5 * s * s))
            })
            .collect();
        let c = regress_matrix_poly(&pts, 2, 1e-14, 0).unwrap();
        assert!((eval_matrix_poly(&c, 0.3).get(0, 0) - (1.0 + 0.6 - 0.045)).abs() < 1e-8);
    }
}
