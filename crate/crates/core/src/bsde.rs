//! Backward regression Monte Carlo for linear BSDEs on one period, with the
//! periodic terminal value found by iterating on the deterministic time-0
//! value.
//!
//! At every grid node the first component is stored as a polynomial in the
//! within-period Brownian partial sum `s`. Because the next node is also a
//! polynomial, its conditional expectation and the martingale integrand
//! `E[K_{i+1} ΔW | s]/dt` follow in closed form from Gaussian moments; only
//! the nonlinear dependence of the coefficients on the path is projected by
//! least squares over the samples.

use crate::coefficients::{CoefficientFn, PathPoint, PeriodicCoefficientSet};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::sde::{self, PathBundle};
use crate::stats;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Polynomial features `{1, s, .., s^degree}` of the within-period partial sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 2, ridge: 1e-8 }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, ridge: f64) -> Result<Self> {
        if degree > 4 {
            return Err(Error::InvalidArgument(format!("regression degree {degree} exceeds 4")));
        }
        if !(ridge >= 0.0) {
            return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {ridge}")));
        }
        Ok(RegressionBasis { degree, ridge })
    }

    /// Feature vector at node `node`; phase 0 carries the constant only.
    pub fn features(&self, node: usize, s: f64) -> Vec<f64> {
        let d = if node == 0 { 0 } else { self.degree };
        (0..=d).map(|j| s.powi(j as i32)).collect()
    }
}

/// One-period samples drawn from a bundle: every `(path, period)` pair.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub tau: f64,
    pub steps_per_period: usize,
    n: usize,
    incs: Vec<f64>,
    /// `n × (spp + 1)` partial sums accumulated in simulation order.
    sums: Vec<f64>,
}

impl SampleSet {
    pub fn from_bundle(bundle: &PathBundle) -> Self {
        let spp = bundle.steps_per_period;
        let incs = bundle.increments();
        Self::from_increments(bundle.tau, spp, incs)
    }

    pub fn from_increments(tau: f64, spp: usize, incs: Vec<f64>) -> Self {
        let n = incs.len() / spp;
        let mut sums = vec![0.0; n * (spp + 1)];
        for k in 0..n {
            let mut s = 0.0;
            for j in 0..spp {
                s += incs[k * spp + j];
                sums[k * (spp + 1) + j + 1] = s;
            }
        }
        SampleSet {
            tau,
            steps_per_period: spp,
            n,
            incs,
            sums,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dt(&self) -> f64 {
        self.tau / self.steps_per_period as f64
    }

    #[inline]
    pub fn partial_sum(&self, sample: usize, node: usize) -> f64 {
        self.sums[sample * (self.steps_per_period + 1) + node]
    }

    #[inline]
    pub fn point(&self, sample: usize, node: usize) -> PathPoint<'_> {
        let spp = self.steps_per_period;
        let start = sample * spp;
        let phase = if node == spp { 0.0 } else { node as f64 * self.dt() };
        let prefix = if node == spp { &self.incs[start..start] } else { &self.incs[start..start + node] };
        let s = if node == spp { 0.0 } else { self.partial_sum(sample, node) };
        PathPoint::with_sum(phase, prefix, s)
    }

    #[inline]
    pub fn increment(&self, sample: usize, node: usize) -> f64 {
        self.incs[sample * self.steps_per_period + node]
    }

    /// Contiguous batch `b` of `count`.
    pub fn batch(&self, b: usize, count: usize) -> SampleSet {
        let spp = self.steps_per_period;
        let size = self.n / count;
        let lo = b * size;
        let hi = if b + 1 == count { self.n } else { lo + size };
        SampleSet::from_increments(self.tau, spp, self.incs[lo * spp..hi * spp].to_vec())
    }
}

/// Gaussian moments `E[ΔW^k]`, `k = 0..=max`.
fn gaussian_moments(dt: f64, max: usize) -> Vec<f64> {
    let mut m = vec![0.0; max + 1];
    m[0] = 1.0;
    for k in (2..=max).step_by(2) {
        m[k] = m[k - 2] * (k - 1) as f64 * dt;
    }
    m
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Coefficients in `s` of `E[P(s+ΔW)]` and `E[P(s+ΔW)ΔW]/dt`.
fn conditional_polys(c: &[Mat], dt: f64) -> (Vec<Mat>, Vec<Mat>) {
    let d = c.len() - 1;
    let mu = gaussian_moments(dt, d + 1);
    let zero = Mat::zeros(c[0].rows(), c[0].cols());
    let mut e = vec![zero; d + 1];
    let mut l = vec![zero; d.max(1)];
    for (j, cj) in c.iter().enumerate() {
        for k in 0..=j {
            let p = j - k;
            let w = binom(j, k);
            if mu[k] != 0.0 {
                e[p] = e[p].axpy(w * mu[k], cj);
            }
            if mu[k + 1] != 0.0 {
                l[p] = l[p].axpy(w * mu[k + 1] / dt, cj);
            }
        }
    }
    (e, l)
}

#[inline]
fn horner(c: &[Mat], s: f64) -> Mat {
    let mut acc = c[c.len() - 1];
    for m in c.iter().rev().skip(1) {
        acc = m.axpy(s, &acc);
    }
    acc
}

/// One outer fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointStep {
    pub iteration: usize,
    pub value: Mat,
    pub update_norm: f64,
    pub ratio: Option<f64>,
}

/// Grid solution of a BSDE on one period.
#[derive(Debug, Clone)]
pub struct BsdeGridSolution {
    pub tau: f64,
    pub steps_per_period: usize,
    pub shape: (usize, usize),
    pub symmetric: bool,
    pub basis: RegressionBasis,
    /// Per node `0..=spp`: polynomial coefficients in `s` of the first component.
    pub coeffs: Vec<Vec<Mat>>,
    /// Per node `0..spp`: polynomial coefficients of the martingale integrand.
    pub integrand: Vec<Vec<Mat>>,
    /// Deterministic terminal value used by the final sweep.
    pub terminal: Mat,
    /// Deterministic time-0 value (the converged fixed point).
    pub fixed_point: Mat,
    pub trace: Vec<FixedPointStep>,
    /// Geometric mean of the last update ratios.
    pub contraction_ratio: Option<f64>,
    pub node_means: Vec<Mat>,
    pub integrand_means: Vec<Mat>,
    /// Standard error of each node mean (regression residual).
    pub node_stderr: Vec<f64>,
    /// Standard error of the increment estimator `K_{i+1}ΔW/dt` at each node.
    pub integrand_stderr: Vec<f64>,
    /// Range of `s` covered by samples at each node; evaluation clamps to it.
    pub support: Vec<(f64, f64)>,
    pub n_samples: usize,
    /// Set when the threshold was raised to the statistical floor.
    pub statistical_floor: Option<f64>,
}

impl BsdeGridSolution {
    pub fn dt(&self) -> f64 {
        self.tau / self.steps_per_period as f64
    }

    /// First component at grid node `node` and partial sum `s`.
    #[inline]
    pub fn value(&self, node: usize, s: f64) -> Mat {
        let (lo, hi) = self.support[node];
        horner(&self.coeffs[node], s.clamp(lo, hi))
    }

    /// Martingale integrand at node `node < spp`.
    #[inline]
    pub fn integrand_value(&self, node: usize, s: f64) -> Mat {
        let (lo, hi) = self.support[node];
        horner(&self.integrand[node.min(self.steps_per_period - 1)], s.clamp(lo, hi))
    }

    /// First component at an arbitrary phase, linearly interpolated between
    /// the neighbouring nodes.
    pub fn value_at_phase(&self, phase: f64, s: f64) -> Mat {
        let x = phase / self.dt();
        let i = x.round();
        if (x - i).abs() < 1e-9 {
            return self.value((i as usize).min(self.steps_per_period), s);
        }
        let lo = (x.floor() as usize).min(self.steps_per_period - 1);
        let w = x - lo as f64;
        self.value(lo, s).scale(1.0 - w).axpy(w, &self.value(lo + 1, s))
    }

    pub fn integrand_at_phase(&self, phase: f64, s: f64) -> Mat {
        let i = ((phase / self.dt()).floor() as usize).min(self.steps_per_period - 1);
        self.integrand_value(i, s)
    }

    /// `|value(phase 0) − terminal|_F`.
    pub fn periodic_residual(&self) -> f64 {
        (self.fixed_point - self.terminal).frobenius()
    }

    /// Largest asymmetry over nodes at the support ends and centre.
    pub fn max_asymmetry(&self) -> f64 {
        if self.shape.0 != self.shape.1 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for (i, &(lo, hi)) in self.support.iter().enumerate() {
            for s in [lo, 0.5 * (lo + hi), hi] {
                worst = worst.max(self.value(i, s).asymmetry());
            }
        }
        worst
    }

    /// Smallest eigenvalue over nodes on an 11-point grid of each node's support.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for (i, &(lo, hi)) in self.support.iter().enumerate() {
            for k in 0..=10 {
                let s = lo + (hi - lo) * k as f64 / 10.0;
                worst = worst.min(self.value(i, s).min_eigenvalue());
            }
        }
        worst
    }

    /// Columns `t, k_ij.., l_ij.., stderr_k, stderr_l`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (r, c) = self.shape;
        write!(w, "t")?;
        for prefix in ["k", "l"] {
            for i in 0..r {
                for j in 0..c {
                    if c == 1 {
                        write!(w, ",{prefix}{i}")?;
                    } else {
                        write!(w, ",{prefix}{i}{j}")?;
                    }
                }
            }
        }
        writeln!(w, ",stderr_k,stderr_l")?;
        for i in 0..=self.steps_per_period {
            write!(w, "{}", i as f64 * self.dt())?;
            for v in self.node_means[i].entries() {
                write!(w, ",{v}")?;
            }
            let (l, le) = if i < self.steps_per_period {
                (self.integrand_means[i], self.integrand_stderr[i])
            } else {
                (Mat::zeros(r, c), 0.0)
            };
            for v in l.entries() {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", self.node_stderr[i], le)?;
        }
        Ok(())
    }

    pub fn trace_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Trace<'a> {
            fixed_point: &'a Mat,
            periodic_residual: f64,
            contraction_ratio: Option<f64>,
            statistical_floor: Option<f64>,
            iterations: &'a [FixedPointStep],
        }
        Ok(serde_json::to_string_pretty(&Trace {
            fixed_point: &self.fixed_point,
            periodic_residual: self.periodic_residual(),
            contraction_ratio: self.contraction_ratio,
            statistical_floor: self.statistical_floor,
            iterations: &self.trace,
        })?)
    }
}

/// Drift of a linear BSDE `dY = −f(t, Y, Z)dt + Z dW` at one sample point.
pub trait Driver: Sync {
    fn drift(&self, sample: usize, node: usize, p: &PathPoint, y: &Mat, z: &Mat) -> Mat;
}

impl<F> Driver for F
where
    F: Fn(&PathPoint, &Mat, &Mat) -> Mat + Sync,
{
    #[inline]
    fn drift(&self, _: usize, _: usize, p: &PathPoint, y: &Mat, z: &Mat) -> Mat {
        self(p, y, z)
    }
}

const CHUNK: usize = 1024;
const MAX_FEATURES: usize = 5;
const MAX_ENTRIES: usize = crate::linalg::MAX_DIM * crate::linalg::MAX_DIM;

/// Sufficient statistics of one node's regression over a block of samples.
#[derive(Clone)]
struct NodeAccumulator {
    gram: [[f64; MAX_FEATURES]; MAX_FEATURES],
    rhs: [[f64; MAX_ENTRIES]; MAX_FEATURES],
    target_sq: [f64; MAX_ENTRIES],
    naive_sum: [f64; MAX_ENTRIES],
    naive_sq: [f64; MAX_ENTRIES],
    lo: f64,
    hi: f64,
    /// First offending sample: non-finite target (NaN) or asymmetry.
    bad: Option<(usize, f64)>,
}

impl NodeAccumulator {
    fn new() -> Self {
        NodeAccumulator {
            gram: [[0.0; MAX_FEATURES]; MAX_FEATURES],
            rhs: [[0.0; MAX_ENTRIES]; MAX_FEATURES],
            target_sq: [0.0; MAX_ENTRIES],
            naive_sum: [0.0; MAX_ENTRIES],
            naive_sq: [0.0; MAX_ENTRIES],
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
            bad: None,
        }
    }

    fn merge(&mut self, o: &NodeAccumulator) {
        for a in 0..MAX_FEATURES {
            for b in 0..MAX_FEATURES {
                self.gram[a][b] += o.gram[a][b];
            }
            for e in 0..MAX_ENTRIES {
                self.rhs[a][e] += o.rhs[a][e];
            }
        }
        for e in 0..MAX_ENTRIES {
            self.target_sq[e] += o.target_sq[e];
            self.naive_sum[e] += o.naive_sum[e];
            self.naive_sq[e] += o.naive_sq[e];
        }
        self.lo = self.lo.min(o.lo);
        self.hi = self.hi.max(o.hi);
        if self.bad.is_none() {
            self.bad = o.bad;
        }
    }
}

/// Backward induction from a deterministic terminal value over one period.
pub fn backward_sweep<D: Driver>(
    driver: &D,
    terminal: Mat,
    samples: &SampleSet,
    basis: &RegressionBasis,
    symmetric: bool,
) -> Result<BsdeGridSolution> {
    let spp = samples.steps_per_period;
    let dt = samples.dt();
    let n = samples.len();
    if n < 2 * (basis.degree + 1) {
        return Err(Error::InvalidArgument(format!("{n} samples are too few for degree {}", basis.degree)));
    }
    if !terminal.is_finite() {
        return Err(Error::InvalidArgument("terminal value is not finite".into()));
    }
    let shape = terminal.shape();
    let ne = shape.0 * shape.1;
    let nf = n as f64;
    let zero = Mat::zeros(shape.0, shape.1);
    let mut coeffs = vec![Vec::new(); spp + 1];
    let mut integrand = vec![Vec::new(); spp];
    let mut node_means = vec![zero; spp + 1];
    let mut integrand_means = vec![zero; spp];
    let mut node_stderr = vec![0.0; spp + 1];
    let mut integrand_stderr = vec![0.0; spp];
    let mut support = vec![(0.0, 0.0); spp + 1];
    let mut term = vec![zero; basis.degree + 1];
    term[0] = terminal;
    coeffs[spp] = term;
    node_means[spp] = terminal;

    for i in (0..spp).rev() {
        let next = &coeffs[i + 1];
        let (e_poly, l_poly) = conditional_polys(next, dt);
        let degree = if i == 0 { 0 } else { basis.degree };
        let p = degree + 1;
        // Features are scaled by the standard deviation of the partial sum.
        let scale = if i == 0 { 1.0 } else { (i as f64 * dt).sqrt() };
        let blocks: Vec<NodeAccumulator> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = NodeAccumulator::new();
                let mut phi = [0.0; MAX_FEATURES];
                for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let pt = samples.point(k, i);
                    let s = pt.partial_sum;
                    let e = horner(&e_poly, s);
                    let l = horner(&l_poly, s);
                    let mut target = e.axpy(dt, &driver.drift(k, i, &pt, &e, &l));
                    if !target.is_finite() {
                        acc.bad.get_or_insert((k, f64::NAN));
                        continue;
                    }
                    if symmetric {
                        let asym = target.asymmetry();
                        if asym > 1e-10 * (1.0 + target.max_abs()) {
                            acc.bad.get_or_insert((k, asym));
                        }
                        target = target.symmetrize();
                    }
                    let dw = samples.increment(k, i);
                    let naive = horner(next, s + dw).scale(dw / dt);
                    let z = s / scale;
                    phi[0] = 1.0;
                    for j in 1..p {
                        phi[j] = phi[j - 1] * z;
                    }
                    for a in 0..p {
                        for b in a..p {
                            acc.gram[a][b] += phi[a] * phi[b];
                        }
                        for e in 0..ne {
                            acc.rhs[a][e] += phi[a] * target.flat(e);
                        }
                    }
                    for e in 0..ne {
                        let t = target.flat(e);
                        acc.target_sq[e] += t * t;
                        let v = naive.flat(e);
                        acc.naive_sum[e] += v;
                        acc.naive_sq[e] += v * v;
                    }
                    acc.lo = acc.lo.min(s);
                    acc.hi = acc.hi.max(s);
                }
                acc
            })
            .collect();
        let mut acc = NodeAccumulator::new();
        for b in &blocks {
            acc.merge(b);
        }
        match acc.bad {
            Some((k, a)) if a.is_nan() => {
                return Err(Error::Degenerate(format!("non-finite BSDE value at node {i}, sample {k}")));
            }
            Some((_, a)) => {
                return Err(Error::NotSymmetric {
                    matrix: format!("BSDE drift at node {i}"),
                    asymmetry: a,
                });
            }
            None => {}
        }
        support[i] = (acc.lo, acc.hi);
        let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut rhs = nalgebra::DMatrix::<f64>::zeros(p, ne);
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] = acc.gram[a][b] / nf;
                gram[(b, a)] = gram[(a, b)];
            }
            for e in 0..ne {
                rhs[(a, e)] = acc.rhs[a][e] / nf;
            }
        }
        let moments: Vec<f64> = (0..p).map(|a| gram[(0, a)]).collect();
        let mut penalised = gram.clone();
        // The intercept is left unpenalised so constant targets are reproduced.
        for a in 1..p {
            penalised[(a, a)] += basis.ridge;
        }
        let beta = if p == 1 {
            rhs.clone()
        } else {
            let eig = penalised.clone().symmetric_eigenvalues();
            let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let cond = emax / emin;
            if !(cond < 1e12) {
                return Err(Error::IllConditioned { node: i, condition: cond });
            }
            let chol = penalised.cholesky().ok_or(Error::IllConditioned { node: i, condition: cond })?;
            chol.solve(&rhs)
        };
        let mut fit = vec![zero; basis.degree + 1];
        let mut mean = zero;
        let mut rss = 0.0;
        for e in 0..ne {
            let mut fitted_sq = 0.0;
            let mut cross = 0.0;
            let mut m = 0.0;
            for a in 0..p {
                cross += beta[(a, e)] * rhs[(a, e)];
                m += beta[(a, e)] * moments[a];
                for b in 0..p {
                    fitted_sq += beta[(a, e)] * gram[(a, b)] * beta[(b, e)];
                }
            }
            rss += (acc.target_sq[e] / nf - 2.0 * cross + fitted_sq).max(0.0);
            mean.set_flat(e, m);
            for a in 0..p {
                fit[a].set_flat(e, beta[(a, e)] / scale.powi(a as i32));
            }
        }
        if symmetric {
            for c in fit.iter_mut() {
                *c = c.symmetrize();
            }
            mean = mean.symmetrize();
        }
        node_stderr[i] = (rss / nf).sqrt();
        node_means[i] = mean;

        let mut lmean = zero;
        for (a, c) in l_poly.iter().enumerate() {
            let m = if a < p { moments[a] * scale.powi(a as i32) } else { 0.0 };
            lmean = lmean.axpy(m, c);
        }
        integrand_means[i] = lmean;
        let mut se2 = 0.0;
        if n > 1 {
            for e in 0..ne {
                let mu = acc.naive_sum[e] / nf;
                let var = (acc.naive_sq[e] / nf - mu * mu).max(0.0) * nf / (nf - 1.0);
                se2 += var / nf;
            }
        }
        integrand_stderr[i] = se2.sqrt();
        coeffs[i] = fit;
        integrand[i] = l_poly;
    }
    support[spp] = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..n {
            let s = samples.partial_sum(k, spp);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        (lo, hi)
    };
    let fixed_point = coeffs[0][0];
    Ok(BsdeGridSolution {
        tau: samples.tau,
        steps_per_period: spp,
        shape,
        symmetric,
        basis: *basis,
        coeffs,
        integrand,
        terminal,
        fixed_point,
        trace: Vec::new(),
        contraction_ratio: None,
        node_means,
        integrand_means,
        node_stderr,
        integrand_stderr,
        support,
        n_samples: n,
        statistical_floor: None,
    })
}

/// Stopping and start options of the outer fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Estimated standard error of the time-0 value; the loop stops once the
    /// update falls below `max(tol, 0.5·floor)`.
    pub statistical_floor: Option<f64>,
    /// Starting terminal value; zero when absent.
    pub initial: Option<Mat>,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: 1e-6,
            max_iter: 200,
            statistical_floor: None,
            initial: None,
        }
    }
}

/// Iterates `M ← time-0 value of the sweep with terminal M` on frozen samples.
pub fn solve_fixed_point<D: Driver>(
    driver: &D,
    shape: (usize, usize),
    samples: &SampleSet,
    basis: &RegressionBasis,
    symmetric: bool,
    opts: &FixedPointOptions,
) -> Result<BsdeGridSolution> {
    let mut m = opts.initial.unwrap_or_else(|| Mat::zeros(shape.0, shape.1));
    if m.shape() != shape {
        return Err(Error::ShapeMismatch {
            what: "fixed-point start".into(),
            expected: shape,
            actual: m.shape(),
        });
    }
    let threshold = match opts.statistical_floor {
        Some(f) => opts.tol.max(0.5 * f),
        None => opts.tol,
    };
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut growing = 0;
    for it in 1..=opts.max_iter {
        let mut sol = backward_sweep(driver, m, samples, basis, symmetric)?;
        let next = sol.fixed_point;
        let update = (next - m).frobenius();
        let ratio = prev.filter(|&p| p > 0.0).map(|p| update / p);
        trace.push(FixedPointStep {
            iteration: it,
            value: next,
            update_norm: update,
            ratio,
        });
        if !update.is_finite() || next.max_abs() > 1e12 {
            return Err(Error::NoContraction {
                iterations: it,
                last_update: update,
            });
        }
        if update < threshold {
            let ratios: Vec<f64> = trace.iter().filter_map(|s| s.ratio).filter(|r| *r > 0.0).collect();
            let tail = &ratios[ratios.len().saturating_sub(3)..];
            sol.contraction_ratio = if tail.is_empty() {
                None
            } else {
                Some((tail.iter().map(|r| r.ln()).sum::<f64>() / tail.len() as f64).exp())
            };
            sol.trace = trace;
            sol.statistical_floor = opts.statistical_floor;
            return Ok(sol);
        }
        if matches!(ratio, Some(r) if r >= 1.0) {
            growing += 1;
            if growing >= 5 {
                return Err(Error::NoContraction {
                    iterations: it,
                    last_update: update,
                });
            }
        } else {
            growing = 0;
        }
        prev = Some(update);
        m = next;
    }
    Err(Error::NoContraction {
        iterations: opts.max_iter,
        last_update: prev.unwrap_or(f64::NAN),
    })
}

/// Standard error of the time-0 value by batch means: the samples are split
/// into `batches` disjoint groups, each solved to its own fixed point.
pub fn fixed_point_stderr<D: Driver>(
    driver: &D,
    shape: (usize, usize),
    samples: &SampleSet,
    basis: &RegressionBasis,
    symmetric: bool,
    opts: &FixedPointOptions,
    batches: usize,
) -> Result<(f64, Vec<Mat>)> {
    if batches < 2 {
        return Err(Error::InvalidArgument("batch means need at least 2 batches".into()));
    }
    let mut values = Vec::with_capacity(batches);
    let opts = FixedPointOptions {
        statistical_floor: None,
        ..opts.clone()
    };
    for b in 0..batches {
        let part = samples.batch(b, batches);
        let subset = SubsetDriver { inner: driver, offset: b * (samples.len() / batches) };
        values.push(solve_fixed_point(&subset, shape, &part, basis, symmetric, &opts)?.fixed_point);
    }
    Ok((matrix_batch_stderr(&values), values))
}

/// Frobenius norm of the entrywise batch-means standard errors.
pub fn matrix_batch_stderr(values: &[Mat]) -> f64 {
    let mut se2 = 0.0;
    for e in 0..values[0].len() {
        let xs: Vec<f64> = values.iter().map(|m| m.flat(e)).collect();
        se2 += stats::batch_stderr(&xs).powi(2);
    }
    se2.sqrt()
}

struct SubsetDriver<'a, D> {
    inner: &'a D,
    offset: usize,
}

impl<D: Driver> Driver for SubsetDriver<'_, D> {
    fn drift(&self, sample: usize, node: usize, p: &PathPoint, y: &Mat, z: &Mat) -> Mat {
        self.inner.drift(sample + self.offset, node, p, y, z)
    }
}

/// A coefficient read on the grid of a sample set: deterministic ones are
/// tabulated once per node, path functionals are evaluated per sample.
pub(crate) enum GridCoeff<'a> {
    Fixed(Vec<Mat>),
    Live(&'a CoefficientFn),
}

impl<'a> GridCoeff<'a> {
    pub(crate) fn new(f: &'a CoefficientFn, tau: f64, spp: usize) -> Self {
        if f.is_deterministic() {
            let dt = tau / spp as f64;
            GridCoeff::Fixed((0..spp).map(|i| f.at(&PathPoint::deterministic(i as f64 * dt))).collect())
        } else {
            GridCoeff::Live(f)
        }
    }

    #[inline]
    pub(crate) fn at(&self, node: usize, p: &PathPoint) -> Mat {
        match self {
            GridCoeff::Fixed(v) => v[node],
            GridCoeff::Live(f) => f.at(p),
        }
    }
}

/// `KA + AᵀK + CᵀKC + LC + CᵀL + Λ`.
#[inline]
pub(crate) fn lyapunov_drift(a: &Mat, c: &Mat, lambda: &Mat, k: &Mat, l: &Mat) -> Mat {
    let ct = c.transpose();
    *k * *a + a.transpose() * *k + ct * *k * *c + *l * *c + ct * *l + *lambda
}

/// Solves the linear matrix BSDE with drift `KA + AᵀK + CᵀKC + LC + CᵀL + Λ`
/// and periodic terminal condition. `expect_psd` enables the eigenvalue
/// floor check for a positive semidefinite source.
pub fn solve_linear_matrix_bsde(
    a: &CoefficientFn,
    c: &CoefficientFn,
    lambda: &CoefficientFn,
    samples: &SampleSet,
    basis: &RegressionBasis,
    opts: &FixedPointOptions,
    expect_psd: bool,
) -> Result<BsdeGridSolution> {
    let (n, n2) = a.shape();
    for (what, f) in [("C", c), ("Lambda", lambda)] {
        if f.shape() != (n, n2) || n != n2 {
            return Err(Error::ShapeMismatch {
                what: what.into(),
                expected: (n, n),
                actual: f.shape(),
            });
        }
    }
    let spp = samples.steps_per_period;
    let (ga, gc, gl) = (
        GridCoeff::new(a, samples.tau, spp),
        GridCoeff::new(c, samples.tau, spp),
        GridCoeff::new(lambda, samples.tau, spp),
    );
    let driver = LyapunovDriver { a: ga, c: gc, lambda: gl };
    let sol = solve_fixed_point(&driver, (n, n), samples, basis, true, opts)?;
    check_symmetric_psd(&sol, expect_psd)?;
    Ok(sol)
}

pub(crate) struct LyapunovDriver<'a> {
    pub(crate) a: GridCoeff<'a>,
    pub(crate) c: GridCoeff<'a>,
    pub(crate) lambda: GridCoeff<'a>,
}

impl Driver for LyapunovDriver<'_> {
    #[inline]
    fn drift(&self, _: usize, node: usize, p: &PathPoint, k: &Mat, l: &Mat) -> Mat {
        lyapunov_drift(&self.a.at(node, p), &self.c.at(node, p), &self.lambda.at(node, p).symmetrize(), k, l)
    }
}

pub(crate) fn check_symmetric_psd(sol: &BsdeGridSolution, expect_psd: bool) -> Result<()> {
    let asym = sol.max_asymmetry();
    if asym > 1e-10 {
        return Err(Error::NotSymmetric {
            matrix: "K".into(),
            asymmetry: asym,
        });
    }
    if expect_psd {
        let scale = sol.fixed_point.frobenius().max(1.0);
        let floor = 1e-8 * scale;
        let emin = sol.min_eigenvalue();
        if emin < -floor {
            return Err(Error::PositivityViolated {
                min_eigenvalue: emin,
                floor: -floor,
            });
        }
    }
    Ok(())
}

/// Inputs of the vector BSDE besides `(K, L)`.
pub struct VectorBsdeData<'a> {
    pub a: &'a CoefficientFn,
    pub c: &'a CoefficientFn,
    pub drift: &'a CoefficientFn,
    pub sigma: &'a CoefficientFn,
    pub inhomogeneity: &'a CoefficientFn,
}

/// Solves `dη = −(Aᵀη + Cᵀζ + Kb + CᵀKσ + Lσ + λ)dt + ζ dW` with periodic
/// terminal condition, reading `(K, L)` from a matrix solution on the same grid.
pub fn solve_vector_bsde(
    data: &VectorBsdeData,
    k: &BsdeGridSolution,
    samples: &SampleSet,
    basis: &RegressionBasis,
    opts: &FixedPointOptions,
) -> Result<BsdeGridSolution> {
    if k.steps_per_period != samples.steps_per_period || (k.tau - samples.tau).abs() > 1e-12 {
        return Err(Error::InvalidArgument(
            "K solution and samples use different grids".into(),
        ));
    }
    let n = k.shape.0;
    for (what, f, shape) in [
        ("A", data.a, (n, n)),
        ("C", data.c, (n, n)),
        ("b", data.drift, (n, 1)),
        ("sigma", data.sigma, (n, 1)),
        ("lambda", data.inhomogeneity, (n, 1)),
    ] {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch {
                what: what.into(),
                expected: shape,
                actual: f.shape(),
            });
        }
    }
    let spp = samples.steps_per_period;
    let g = |f| GridCoeff::new(f, samples.tau, spp);
    let driver = VectorDriver {
        a: g(data.a),
        c: g(data.c),
        drift: g(data.drift),
        sigma: g(data.sigma),
        inhomogeneity: g(data.inhomogeneity),
        k,
    };
    solve_fixed_point(&driver, (n, 1), samples, basis, false, opts)
}

struct VectorDriver<'a> {
    a: GridCoeff<'a>,
    c: GridCoeff<'a>,
    drift: GridCoeff<'a>,
    sigma: GridCoeff<'a>,
    inhomogeneity: GridCoeff<'a>,
    k: &'a BsdeGridSolution,
}

impl Driver for VectorDriver<'_> {
    #[inline]
    fn drift(&self, _: usize, node: usize, p: &PathPoint, eta: &Mat, zeta: &Mat) -> Mat {
        let a = self.a.at(node, p);
        let c = self.c.at(node, p);
        let sigma = self.sigma.at(node, p);
        let kk = self.k.value(node, p.partial_sum);
        let ll = self.k.integrand_value(node, p.partial_sum);
        let ct = c.transpose();
        a.transpose() * *eta + ct * *zeta + kk * self.drift.at(node, p) + ct * kk * sigma + ll * sigma + self.inhomogeneity.at(node, p)
    }
}

/// Truncated Monte Carlo of `E∫₀^T Φ_sᵀΛ_sΦ_s ds` against the BSDE time-0 value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub estimate: Mat,
    pub estimate_stderr: f64,
    /// `|K₀ − estimate|_F / |K₀|_F` (denominator 1 when `K₀ = 0`).
    pub residual: f64,
    pub residual_stderr: f64,
    pub tail_bound: f64,
    pub warnings: Vec<String>,
}

/// Checks the solution of a linear matrix BSDE against the representation
/// `K₀ = E∫₀^∞ Φ_sᵀ Λ_s Φ_s ds` (with `A` closed by `feedback` when given).
pub fn representation_check(
    solution: &BsdeGridSolution,
    set: &PeriodicCoefficientSet,
    feedback: Option<&crate::coefficients::FeedbackLaw>,
    lambda: &CoefficientFn,
    bundle_long: &PathBundle,
    t_max: f64,
    tol: f64,
) -> Result<RepresentationReport> {
    let n = set.n;
    let spp = bundle_long.steps_per_period;
    let dt = bundle_long.dt();
    let end = (t_max / dt).round() as usize;
    if end == 0 || end > bundle_long.total_steps() {
        return Err(Error::InvalidArgument(format!("T_max = {t_max} outside the bundle horizon")));
    }
    let per_path: Vec<Option<Mat>> = bundle_long.map_paths(|_, incs| {
        let mut phi = Mat::identity(n);
        let first = lambda.at(&PathPoint::deterministic(0.0)).symmetrize();
        let mut acc = (phi.transpose() * first * phi).scale(0.5 * dt);
        let res = sde::for_each_node(incs, spp, dt, 0, end, |node, p, dw| {
            phi = sde::fundamental_step(set, feedback, p, &phi, dt, dw);
            let q = crate::coefficients::point_at_node(incs, node + 1, spp, dt);
            let lam = lambda.at(&q).symmetrize();
            let w = if node + 1 == end { 0.5 } else { 1.0 };
            acc = acc.axpy(w * dt, &(phi.transpose() * lam * phi));
            phi.max_abs() < sde::OVERFLOW_LIMIT
        });
        res.ok().map(|_| acc)
    });
    let alive: Vec<Mat> = per_path.into_iter().flatten().collect();
    if alive.len() < bundle_long.n_paths {
        return Err(Error::Overflow {
            path: 0,
            node: end,
        });
    }
    let mut est = Mat::zeros(n, n);
    let mut se2 = 0.0;
    for e in 0..est.len() {
        let xs: Vec<f64> = alive.iter().map(|m| m.flat(e)).collect();
        let x = bundle_long.estimate(&xs);
        est.set_flat(e, x.value);
        se2 += x.stderr.powi(2);
    }
    let se = se2.sqrt();
    let k0 = solution.fixed_point;
    let denom = if k0.frobenius() > 0.0 { k0.frobenius() } else { 1.0 };
    let traj = sde::simulate_fundamental(set, feedback, &bundle_long.reseeded(bundle_long.seed ^ 0x5eed), &sde::Recording::PeriodEnds)?;
    let mut warnings = Vec::new();
    let tail = match sde::estimate_second_moment_decay(&traj) {
        Ok(fit) if fit.lambda_hat > 0.0 => {
            let lam_sup = lambda.bound() * n as f64;
            fit.beta_hat * lam_sup * (-fit.lambda_hat * t_max).exp() / fit.lambda_hat
        }
        _ => f64::INFINITY,
    };
    if tail > tol / 10.0 {
        warnings.push(format!("truncation tail bound {tail:.3e} exceeds tol/10 = {:.3e}", tol / 10.0));
    }
    Ok(RepresentationReport {
        estimate: est,
        estimate_stderr: se,
        residual: (k0 - est).frobenius() / denom,
        residual_stderr: se / denom,
        tail_bound: tail,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::builtin_scenario;

    fn samples(n: usize, spp: usize, seed: u64) -> SampleSet {
        SampleSet::from_bundle(&PathBundle::new(1.0, spp, 1, n, seed).unwrap())
    }

    #[test]
    fn conditional_polynomials_match_gaussian_moments() {
        let c = [Mat::scalar(1.0), Mat::scalar(2.0), Mat::scalar(3.0)];
        let (e, l) = conditional_polys(&c, 0.1);
        // E[1 + 2(s+w) + 3(s+w)²] = 1 + 0.3 + 2s + 3s².
        assert!((e[0].get(0, 0) - 1.3).abs() < 1e-15);
        assert_eq!(e[1].get(0, 0), 2.0);
        assert_eq!(e[2].get(0, 0), 3.0);
        // E[(2(s+w) + 3(s+w)²) w]/dt = 2 + 6s.
        assert!((l[0].get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l[1].get(0, 0) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn basis_is_constant_at_phase_zero() {
        let b = RegressionBasis::default();
        assert_eq!(b.features(0, 0.7), vec![1.0]);
        assert_eq!(b.features(3, 2.0), vec![1.0, 2.0, 4.0]);
        assert!(RegressionBasis::new(9, 0.0).is_err());
    }

    #[test]
    fn zero_drift_keeps_terminal() {
        let s = samples(200, 16, 1);
        let m = Mat::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let zero = |_: &PathPoint, _: &Mat, _: &Mat| Mat::zeros(2, 2);
        let sol = backward_sweep(&zero, m, &s, &RegressionBasis::default(), true).unwrap();
        for i in 0..=16 {
            assert!((sol.value(i, 0.3) - m).max_abs() < 1e-12);
        }
        for i in 0..16 {
            assert!(sol.integrand_value(i, -0.2).max_abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_lyapunov_sweep() {
        let s = samples(200, 64, 2);
        let d = |_: &PathPoint, k: &Mat, _: &Mat| k.scale(-2.0) + Mat::scalar(1.0);
        let sol = backward_sweep(&d, Mat::scalar(0.5), &s, &RegressionBasis::default(), true).unwrap();
        for i in 0..=64 {
            assert!((sol.value(i, 0.1).get(0, 0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_matrix_fixed_point() {
        let s = samples(100, 64, 3);
        let a = CoefficientFn::scalar(-1.0);
        let c = CoefficientFn::scalar(0.0);
        let one = CoefficientFn::scalar(1.0);
        let sol = solve_linear_matrix_bsde(&a, &c, &one, &s, &RegressionBasis::default(), &FixedPointOptions::default(), true).unwrap();
        assert!((sol.fixed_point.get(0, 0) - 0.5).abs() < 1e-6);
        // First iterate from zero: explicit-scheme geometric sum.
        let m1 = sol.trace[0].value.get(0, 0);
        let disc = (1.0 - (1.0f64 - 2.0 / 64.0).powi(64)) / 2.0;
        assert!((m1 - disc).abs() < 1e-12);
        assert!((m1 - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 0.01 * 0.43233);
        let ratio = sol.contraction_ratio.unwrap();
        assert!(ratio < 1.0 && (ratio - (1.0f64 - 2.0 / 64.0).powi(64)).abs() < 1e-3);
        assert!(sol.periodic_residual() < 1e-6);

        let zero = CoefficientFn::scalar(0.0);
        let z = solve_linear_matrix_bsde(&a, &c, &zero, &s, &RegressionBasis::default(), &FixedPointOptions::default(), true).unwrap();
        assert_eq!(z.fixed_point.get(0, 0), 0.0);
        assert!(z.coeffs.iter().flatten().all(|m| m.get(0, 0) == 0.0));
    }

    #[test]
    fn unstable_dynamics_do_not_contract() {
        let s = samples(50, 16, 3);
        let a = CoefficientFn::scalar(1.0);
        let c = CoefficientFn::scalar(0.0);
        let one = CoefficientFn::scalar(1.0);
        let r = solve_linear_matrix_bsde(&a, &c, &one, &s, &RegressionBasis::default(), &FixedPointOptions::default(), true);
        assert!(matches!(r, Err(Error::NoContraction { .. })));
    }

    #[test]
    fn vector_fixed_point_scalar() {
        let s = samples(100, 64, 4);
        let a = CoefficientFn::scalar(-1.0);
        let c = CoefficientFn::scalar(0.0);
        let k = solve_linear_matrix_bsde(&a, &c, &CoefficientFn::scalar(1.0), &s, &RegressionBasis::default(), &FixedPointOptions::default(), true).unwrap();
        let one = CoefficientFn::scalar(1.0);
        let zero = CoefficientFn::scalar(0.0);
        let data = VectorBsdeData { a: &a, c: &c, drift: &one, sigma: &zero, inhomogeneity: &zero };
        let eta = solve_vector_bsde(&data, &k, &s, &RegressionBasis::default(), &FixedPointOptions::default()).unwrap();
        assert!((eta.fixed_point.get(0, 0) - 0.5).abs() < 1e-6);
        let m1 = eta.trace[0].value.get(0, 0);
        // h = Σ (1−dt)^i · K·dt, the explicit-scheme analogue of 0.5(1−e^{−τ}).
        let disc = 0.5 * (1.0 - (1.0f64 - 1.0 / 64.0).powi(64));
        assert!((m1 - disc).abs() < 1e-7, "{m1} {disc}");

        let data = VectorBsdeData { a: &a, c: &c, drift: &zero, sigma: &zero, inhomogeneity: &zero };
        let eta = solve_vector_bsde(&data, &k, &s, &RegressionBasis::default(), &FixedPointOptions::default()).unwrap();
        assert_eq!(eta.fixed_point.get(0, 0), 0.0);
    }

    #[test]
    fn deterministic_coefficients_have_negligible_integrand() {
        let set = builtin_scenario("planar-deterministic-periodic").unwrap();
        let s = samples(2000, 64, 5);
        let id = CoefficientFn::constant(Mat::identity(2));
        let sol = solve_linear_matrix_bsde(&set.a, &set.c, &id, &s, &RegressionBasis::default(), &FixedPointOptions::default(), true).unwrap();
        for i in 0..64 {
            assert!(sol.integrand_means[i].max_abs() < 3.0 * sol.integrand_stderr[i]);
        }
        assert!(sol.max_asymmetry() < 1e-10);
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,k00,k01,k10,k11,l00,l01,l10,l11,stderr_k,stderr_l\n"));
        assert_eq!(text.lines().count(), 66);
        assert!(sol.trace_json().unwrap().contains("contraction_ratio"));
    }

    #[test]
    fn linearity_and_comparison_in_source() {
        let set = builtin_scenario("scalar-random-periodic").unwrap();
        let s = samples(3000, 32, 6);
        let basis = RegressionBasis::default();
        let opts = FixedPointOptions { tol: 1e-10, ..Default::default() };
        let l1 = set.q.clone();
        let l2 = CoefficientFn::scalar(0.5);
        let sum = l1.plus(&l2).unwrap();
        let k1 = solve_linear_matrix_bsde(&set.a, &set.c, &l1, &s, &basis, &opts, true).unwrap();
        let k2 = solve_linear_matrix_bsde(&set.a, &set.c, &l2, &s, &basis, &opts, true).unwrap();
        let k12 = solve_linear_matrix_bsde(&set.a, &set.c, &sum, &s, &basis, &opts, true).unwrap();
        let lhs = k12.fixed_point.get(0, 0);
        let rhs = k1.fixed_point.get(0, 0) + k2.fixed_point.get(0, 0);
        assert!((lhs - rhs).abs() < 1e-8);
        // Λ₁ + Λ₂ ⪰ Λ₁ pointwise, so the solutions are ordered.
        assert!(k12.fixed_point.get(0, 0) >= k1.fixed_point.get(0, 0));
        assert!(k12.min_eigenvalue() > 0.0);
    }

    #[test]
    fn representation_of_scalar_lyapunov() {
        let set = PeriodicCoefficientSet::new(
            "t",
            1.0,
            CoefficientFn::scalar(-1.0),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
        )
        .unwrap();
        let s = samples(100, 64, 7);
        let one = CoefficientFn::scalar(1.0);
        let sol = solve_linear_matrix_bsde(&set.a, &set.c, &one, &s, &RegressionBasis::default(), &FixedPointOptions::default(), true).unwrap();
        let long = PathBundle::new(1.0, 64, 6, 50, 8).unwrap();
        let rep = representation_check(&sol, &set, None, &one, &long, 5.0, 1e-2).unwrap();
        assert!((rep.estimate.get(0, 0) - 0.5).abs() < 0.01);
        assert!(rep.residual < 0.03);
        let zero = CoefficientFn::scalar(0.0);
        let rep = representation_check(&sol, &set, None, &zero, &long, 5.0, 1e-2).unwrap();
        assert_eq!(rep.estimate.get(0, 0), 0.0);
    }
}
