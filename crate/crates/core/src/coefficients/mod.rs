//! Random periodic coefficient processes.
//!
//! Every coefficient is a functional of the phase inside the current period
//! and of the Brownian increments observed since the start of that period.
//! Evaluating a coefficient at absolute time `t + kτ` on a path therefore
//! equals evaluating it at phase `t` on the path shifted by `kτ`, which is
//! exactly the random periodicity relation `f_{t+kτ} = θ_{kτ} ∘ f_t`.

mod catalog;
mod file;

pub use catalog::{builtin_scenario, catalog_names};
pub use file::{resolve_scenario, CoeffSpec, ScenarioFile};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Symmetric inputs whose asymmetry exceeds this are rejected.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Where a coefficient is evaluated: a phase in `[0, τ)` together with the
/// Brownian increments of the current period up to that phase.
#[derive(Debug, Clone, Copy)]
pub struct PathPoint<'a> {
    pub phase: f64,
    pub prefix: &'a [f64],
    /// `W_{kτ + phase} - W_{kτ}`, the sum of `prefix`.
    pub partial_sum: f64,
}

impl<'a> PathPoint<'a> {
    pub fn new(phase: f64, prefix: &'a [f64]) -> Self {
        PathPoint {
            phase,
            prefix,
            partial_sum: prefix.iter().sum(),
        }
    }

    /// For callers that maintain the running sum incrementally.
    #[inline]
    pub fn with_sum(phase: f64, prefix: &'a [f64], partial_sum: f64) -> Self {
        PathPoint {
            phase,
            prefix,
            partial_sum,
        }
    }

    /// A point on the deterministic skeleton: no increments observed.
    pub fn deterministic(phase: f64) -> PathPoint<'static> {
        PathPoint {
            phase,
            prefix: &[],
            partial_sum: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoeffKind {
    Constant,
    DeterministicPeriodic,
    PathFunctional,
}

type Evaluator = Arc<dyn Fn(&PathPoint) -> Mat + Send + Sync>;

#[derive(Clone)]
enum Source {
    Constant(Mat),
    Harmonic {
        base: Mat,
        sin: Mat,
        cos: Mat,
        harmonic: u32,
        tau: f64,
    },
    Tanh {
        base: Mat,
        amp: Mat,
        scale: f64,
    },
    Custom(Evaluator),
}

/// A bounded, τ-random periodic matrix-valued coefficient.
#[derive(Clone)]
pub struct CoefficientFn {
    kind: CoeffKind,
    rows: usize,
    cols: usize,
    bound: f64,
    source: Source,
}

impl fmt::Debug for CoefficientFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientFn")
            .field("kind", &self.kind)
            .field("shape", &(self.rows, self.cols))
            .field("bound", &self.bound)
            .field("spec", &self.spec())
            .finish()
    }
}

impl CoefficientFn {
    pub fn constant(value: Mat) -> Self {
        CoefficientFn {
            kind: CoeffKind::Constant,
            rows: value.rows(),
            cols: value.cols(),
            bound: value.max_abs(),
            source: Source::Constant(value),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Mat::scalar(v))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Mat::zeros(rows, cols))
    }

    /// `base + sin·sin(2πkt/τ) + cos·cos(2πkt/τ)`.
    pub fn harmonic(tau: f64, base: Mat, sin: Mat, cos: Mat, harmonic: u32) -> Result<Self> {
        check_same_shape("harmonic sin", &base, &sin)?;
        check_same_shape("harmonic cos", &base, &cos)?;
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("period must be positive, got {tau}")));
        }
        let mut bound: f64 = 0.0;
        for k in 0..base.len() {
            bound = bound.max(base.flat(k).abs() + sin.flat(k).abs() + cos.flat(k).abs());
        }
        Ok(CoefficientFn {
            kind: CoeffKind::DeterministicPeriodic,
            rows: base.rows(),
            cols: base.cols(),
            bound,
            source: Source::Harmonic {
                base,
                sin,
                cos,
                harmonic,
                tau,
            },
        })
    }

    /// `base + amp·tanh(scale · (W_t − W_{kτ}))`: a saturating functional of
    /// the Brownian displacement inside the current period.
    pub fn tanh_of_increments(base: Mat, amp: Mat, scale: f64) -> Result<Self> {
        check_same_shape("tanh amplitude", &base, &amp)?;
        let mut bound: f64 = 0.0;
        for k in 0..base.len() {
            bound = bound.max(base.flat(k).abs() + amp.flat(k).abs());
        }
        Ok(CoefficientFn {
            kind: CoeffKind::PathFunctional,
            rows: base.rows(),
            cols: base.cols(),
            bound,
            source: Source::Tanh { base, amp, scale },
        })
    }

    /// Wraps an arbitrary evaluator. The caller promises that `eval` depends
    /// only on the phase and the within-period prefix, and that its entries
    /// stay within `bound`.
    pub fn custom<F>(kind: CoeffKind, rows: usize, cols: usize, bound: f64, eval: F) -> Self
    where
        F: Fn(&PathPoint) -> Mat + Send + Sync + 'static,
    {
        CoefficientFn {
            kind,
            rows,
            cols,
            bound,
            source: Source::Custom(Arc::new(eval)),
        }
    }

    pub fn from_spec(spec: &CoeffSpec, tau: f64) -> Result<Self> {
        match spec {
            CoeffSpec::Constant { value } => Ok(Self::constant(*value)),
            CoeffSpec::DeterministicPeriodic {
                base,
                sin,
                cos,
                harmonic,
            } => Self::harmonic(tau, *base, *sin, *cos, *harmonic),
            CoeffSpec::PathFunctional { base, amp, scale } => {
                Self::tanh_of_increments(*base, *amp, *scale)
            }
        }
    }

    /// Declarative description, when the coefficient has one.
    pub fn spec(&self) -> Option<CoeffSpec> {
        match &self.source {
            Source::Constant(v) => Some(CoeffSpec::Constant { value: *v }),
            Source::Harmonic {
                base,
                sin,
                cos,
                harmonic,
                ..
            } => Some(CoeffSpec::DeterministicPeriodic {
                base: *base,
                sin: *sin,
                cos: *cos,
                harmonic: *harmonic,
            }),
            Source::Tanh { base, amp, scale } => Some(CoeffSpec::PathFunctional {
                base: *base,
                amp: *amp,
                scale: *scale,
            }),
            Source::Custom(_) => None,
        }
    }

    pub fn kind(&self) -> CoeffKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_constant(&self) -> bool {
        self.kind == CoeffKind::Constant
    }

    pub fn is_deterministic(&self) -> bool {
        self.kind != CoeffKind::PathFunctional
    }

    /// The value of a constant coefficient.
    pub fn constant_value(&self) -> Option<Mat> {
        match &self.source {
            Source::Constant(v) => Some(*v),
            _ => None,
        }
    }

    /// Hot-path evaluation without argument checks.
    #[inline]
    pub fn at(&self, p: &PathPoint) -> Mat {
        match &self.source {
            Source::Constant(v) => *v,
            Source::Harmonic {
                base,
                sin,
                cos,
                harmonic,
                tau,
            } => {
                let w = 2.0 * PI * f64::from(*harmonic) * p.phase / tau;
                base.axpy(w.sin(), sin).axpy(w.cos(), cos)
            }
            Source::Tanh { base, amp, scale } => base.axpy((scale * p.partial_sum).tanh(), amp),
            Source::Custom(f) => f(p),
        }
    }

    /// Checked evaluation at `(phase, prefix)` within a period of length `tau`.
    pub fn eval(&self, tau: f64, phase: f64, prefix: &[f64]) -> Result<Mat> {
        if !(0.0..tau).contains(&phase) {
            return Err(Error::PhaseOutOfRange { phase, tau });
        }
        let v = self.at(&PathPoint::new(phase, prefix));
        if v.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                what: "coefficient evaluator output".into(),
                expected: self.shape(),
                actual: v.shape(),
            });
        }
        Ok(v)
    }

    /// Pointwise sum of two coefficients of equal shape.
    pub fn plus(&self, other: &CoefficientFn) -> Result<CoefficientFn> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                what: "coefficient sum".into(),
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        if let (Some(x), Some(y)) = (self.constant_value(), other.constant_value()) {
            return Ok(CoefficientFn::constant(x + y));
        }
        let (f, g) = (self.clone(), other.clone());
        Ok(CoefficientFn::custom(
            combine_kind(self.kind, other.kind),
            self.rows,
            self.cols,
            self.bound + other.bound,
            move |p| f.at(p) + g.at(p),
        ))
    }

    /// Scales by a constant.
    pub fn scaled(&self, s: f64) -> CoefficientFn {
        if let Some(x) = self.constant_value() {
            return CoefficientFn::constant(x.scale(s));
        }
        let f = self.clone();
        CoefficientFn::custom(self.kind, self.rows, self.cols, self.bound * s.abs(), move |p| {
            f.at(p).scale(s)
        })
    }
}

pub(crate) fn combine_kind(a: CoeffKind, b: CoeffKind) -> CoeffKind {
    use CoeffKind::*;
    match (a, b) {
        (PathFunctional, _) | (_, PathFunctional) => PathFunctional,
        (DeterministicPeriodic, _) | (_, DeterministicPeriodic) => DeterministicPeriodic,
        _ => Constant,
    }
}

fn check_same_shape(what: &str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            what: what.into(),
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(())
}

/// Checked coefficient evaluation.
pub fn eval_coeff(f: &CoefficientFn, tau: f64, phase: f64, prefix: &[f64]) -> Result<Mat> {
    f.eval(tau, phase, prefix)
}

/// Discrete realisation of `θ_{kτ} ∘ W`: the increments from period `k` on.
pub fn theta_shift(path: &[f64], k: usize, steps_per_period: usize) -> Result<&[f64]> {
    let offset = k
        .checked_mul(steps_per_period)
        .ok_or_else(|| Error::InvalidArgument("shift offset overflows".into()))?;
    if offset > path.len() {
        return Err(Error::InvalidArgument(format!(
            "shift by {k} periods of {steps_per_period} steps exceeds path length {}",
            path.len()
        )));
    }
    Ok(&path[offset..])
}

/// The within-period point at absolute grid node `node` of a path.
pub fn point_at_node(path: &[f64], node: usize, steps_per_period: usize, dt: f64) -> PathPoint<'_> {
    let j = node % steps_per_period;
    let start = node - j;
    PathPoint::new(j as f64 * dt, &path[start..node])
}

/// All model data of the controlled state equation and the running cost.
#[derive(Debug, Clone)]
pub struct PeriodicCoefficientSet {
    pub name: String,
    pub tau: f64,
    pub n: usize,
    pub m: usize,
    pub a: CoefficientFn,
    pub b: CoefficientFn,
    pub c: CoefficientFn,
    /// Inhomogeneous drift.
    pub drift: CoefficientFn,
    pub sigma: CoefficientFn,
    pub q: CoefficientFn,
    pub s: CoefficientFn,
    pub r: CoefficientFn,
    /// Linear state cost.
    pub q_lin: CoefficientFn,
    /// Linear control cost.
    pub rho: CoefficientFn,
    /// A feedback gain known to stabilise `[A, C; B, 0]`, if one ships with the data.
    pub stabilizer: Option<CoefficientFn>,
}

/// Every coefficient of a set evaluated at one point.
#[derive(Debug, Clone, Copy)]
pub struct CoeffSample {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub drift: Mat,
    pub sigma: Mat,
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
    pub q_lin: Mat,
    pub rho: Mat,
}

impl PeriodicCoefficientSet {
    /// A set with the given dynamics and quadratic costs; every other
    /// coefficient is zero.
    pub fn new(
        name: impl Into<String>,
        tau: f64,
        a: CoefficientFn,
        b: CoefficientFn,
        q: CoefficientFn,
        r: CoefficientFn,
    ) -> Result<Self> {
        let (n, m) = b.shape();
        let set = PeriodicCoefficientSet {
            name: name.into(),
            tau,
            n,
            m,
            a,
            b,
            c: CoefficientFn::zeros(n, n),
            drift: CoefficientFn::zeros(n, 1),
            sigma: CoefficientFn::zeros(n, 1),
            q,
            s: CoefficientFn::zeros(m, n),
            r,
            q_lin: CoefficientFn::zeros(n, 1),
            rho: CoefficientFn::zeros(m, 1),
            stabilizer: None,
        };
        set.validate_shapes()?;
        Ok(set)
    }

    pub fn validate_shapes(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("period must be positive, got {}", self.tau)));
        }
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 || n > crate::linalg::MAX_DIM || m > crate::linalg::MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "dimensions n={n}, m={m} must lie in 1..={}",
                crate::linalg::MAX_DIM
            )));
        }
        let expect = [
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, m)),
            ("C", &self.c, (n, n)),
            ("b", &self.drift, (n, 1)),
            ("sigma", &self.sigma, (n, 1)),
            ("Q", &self.q, (n, n)),
            ("S", &self.s, (m, n)),
            ("R", &self.r, (m, m)),
            ("q", &self.q_lin, (n, 1)),
            ("rho", &self.rho, (m, 1)),
        ];
        for (what, f, shape) in expect {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch {
                    what: what.into(),
                    expected: shape,
                    actual: f.shape(),
                });
            }
        }
        if let Some(th) = &self.stabilizer {
            if th.shape() != (m, n) {
                return Err(Error::ShapeMismatch {
                    what: "stabilizer".into(),
                    expected: (m, n),
                    actual: th.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn with_noise(mut self, c: CoefficientFn, sigma: CoefficientFn) -> Result<Self> {
        self.c = c;
        self.sigma = sigma;
        self.validate_shapes()?;
        Ok(self)
    }

    pub fn with_drift(mut self, drift: CoefficientFn) -> Result<Self> {
        self.drift = drift;
        self.validate_shapes()?;
        Ok(self)
    }

    pub fn with_cross_and_linear(
        mut self,
        s: CoefficientFn,
        q_lin: CoefficientFn,
        rho: CoefficientFn,
    ) -> Result<Self> {
        self.s = s;
        self.q_lin = q_lin;
        self.rho = rho;
        self.validate_shapes()?;
        Ok(self)
    }

    pub fn with_stabilizer(mut self, theta: CoefficientFn) -> Result<Self> {
        self.stabilizer = Some(theta);
        self.validate_shapes()?;
        Ok(self)
    }

    pub fn coefficients(&self) -> [(&'static str, &CoefficientFn); 10] {
        [
            ("A", &self.a),
            ("B", &self.b),
            ("C", &self.c),
            ("b", &self.drift),
            ("sigma", &self.sigma),
            ("Q", &self.q),
            ("S", &self.s),
            ("R", &self.r),
            ("q", &self.q_lin),
            ("rho", &self.rho),
        ]
    }

    /// True when no coefficient reads the Brownian path.
    pub fn is_deterministic(&self) -> bool {
        self.coefficients().iter().all(|(_, f)| f.is_deterministic())
    }

    pub fn is_constant(&self) -> bool {
        self.coefficients().iter().all(|(_, f)| f.is_constant())
    }

    /// Evaluates every coefficient; `Q` and `R` are symmetrised.
    #[inline]
    pub fn sample(&self, p: &PathPoint) -> CoeffSample {
        CoeffSample {
            a: self.a.at(p),
            b: self.b.at(p),
            c: self.c.at(p),
            drift: self.drift.at(p),
            sigma: self.sigma.at(p),
            q: self.q.at(p).symmetrize(),
            s: self.s.at(p),
            r: self.r.at(p).symmetrize(),
            q_lin: self.q_lin.at(p),
            rho: self.rho.at(p),
        }
    }

    /// Same data with the dynamics matrix replaced.
    pub fn with_a(&self, a: CoefficientFn) -> Result<Self> {
        let mut s = self.clone();
        s.a = a;
        s.validate_shapes()?;
        Ok(s)
    }
}

/// Minimum sampled eigenvalues of `R` and of `Q − SᵀR⁻¹S`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PositivityReport {
    pub margin_r: f64,
    pub margin_qsrs: f64,
    pub passed: bool,
}

/// Grid used to draw within-period prefixes when sampling coefficients.
const POSITIVITY_STEPS: usize = 64;

/// Samples `(phase, prefix)` pairs and records the smallest eigenvalues of
/// `R` and `Q − SᵀR⁻¹S`.
pub fn check_positivity(
    set: &PeriodicCoefficientSet,
    n_samples: usize,
    seed: u64,
) -> Result<PositivityReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let dt = set.tau / POSITIVITY_STEPS as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = Vec::with_capacity(POSITIVITY_STEPS);
    let mut margin_r = f64::INFINITY;
    let mut margin_qsrs = f64::INFINITY;
    for i in 0..n_samples {
        // Phase zero first so constant and deterministic data always hit the
        // grid origin, then a random node with a fresh Brownian prefix.
        let node = if i == 0 {
            0
        } else {
            (rand::RngExt::random::<u64>(&mut rng) % POSITIVITY_STEPS as u64) as usize
        };
        prefix.clear();
        for _ in 0..node {
            let z: f64 = StandardNormal.sample(&mut rng);
            prefix.push(z * dt.sqrt());
        }
        let phase = node as f64 * dt;
        let p = PathPoint::new(phase, &prefix);
        let q = set.q.at(&p);
        let r = set.r.at(&p);
        for (name, mat) in [("Q", &q), ("R", &r)] {
            let asym = mat.asymmetry();
            if asym > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    matrix: name.into(),
                    asymmetry: asym,
                });
            }
        }
        let (q, r) = (q.symmetrize(), r.symmetrize());
        let s = set.s.at(&p);
        let r_inv_s = r.solve(&s).ok_or(Error::Singular {
            matrix: "R".into(),
            phase,
        })?;
        let reduced = (q - s.transpose() * r_inv_s).symmetrize();
        margin_r = margin_r.min(r.min_eigenvalue());
        margin_qsrs = margin_qsrs.min(reduced.min_eigenvalue());
    }
    Ok(PositivityReport {
        margin_r,
        margin_qsrs,
        passed: margin_r > 0.0 && margin_qsrs > 0.0,
    })
}

/// Samples a coefficient along random within-period prefixes and returns the
/// largest entry magnitude seen; used to validate the declared bound.
pub fn sampled_sup(f: &CoefficientFn, tau: f64, n_samples: usize, seed: u64) -> f64 {
    let dt = tau / POSITIVITY_STEPS as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut prefix = Vec::with_capacity(POSITIVITY_STEPS);
    for _ in 0..n_samples {
        prefix.clear();
        let mut sum = 0.0;
        for node in 0..POSITIVITY_STEPS {
            let p = PathPoint::with_sum(node as f64 * dt, &prefix, sum);
            worst = worst.max(f.at(&p).max_abs());
            let z: f64 = StandardNormal.sample(&mut rng);
            let dw = z * dt.sqrt();
            prefix.push(dw);
            sum += dw;
        }
    }
    worst
}

/// A closed-loop control `u = Θ X + v`.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    /// Identifies the law in reports and ties burned-in states to it.
    pub id: String,
    pub theta: CoefficientFn,
    pub v: CoefficientFn,
}

impl FeedbackLaw {
    pub fn new(id: impl Into<String>, theta: CoefficientFn, v: CoefficientFn) -> Self {
        FeedbackLaw {
            id: id.into(),
            theta,
            v,
        }
    }

    /// `u = Θ X` with constant `Θ` and `v = 0`.
    pub fn constant_gain(id: impl Into<String>, theta: Mat) -> Self {
        let m = theta.rows();
        FeedbackLaw::new(id, CoefficientFn::constant(theta), CoefficientFn::zeros(m, 1))
    }

    /// The zero control for an `m`-input, `n`-state system.
    pub fn zero(n: usize, m: usize) -> Self {
        FeedbackLaw::constant_gain("zero", Mat::zeros(m, n))
    }

    pub fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        if self.theta.shape() != (m, n) {
            return Err(Error::ShapeMismatch {
                what: "feedback gain".into(),
                expected: (m, n),
                actual: self.theta.shape(),
            });
        }
        if self.v.shape() != (m, 1) {
            return Err(Error::ShapeMismatch {
                what: "feedback offset".into(),
                expected: (m, 1),
                actual: self.v.shape(),
            });
        }
        Ok(())
    }

    /// `(Θ + εΔΘ, v + εΔv)`.
    pub fn perturbed(&self, d_theta: &Mat, d_v: &Mat, eps: f64) -> Result<FeedbackLaw> {
        let theta = self
            .theta
            .plus(&CoefficientFn::constant(d_theta.scale(eps)))?;
        let v = self.v.plus(&CoefficientFn::constant(d_v.scale(eps)))?;
        Ok(FeedbackLaw::new(format!("{}{:+}", self.id, eps), theta, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_c() -> CoefficientFn {
        CoefficientFn::tanh_of_increments(Mat::scalar(-1.0), Mat::scalar(0.5), 1.0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let two = CoefficientFn::scalar(2.0);
        assert_eq!(two.eval(1.0, 0.7, &[0.3]).unwrap(), Mat::scalar(2.0));

        let a = CoefficientFn::harmonic(
            1.0,
            Mat::scalar(-2.0),
            Mat::scalar(1.0),
            Mat::scalar(0.0),
            1,
        )
        .unwrap();
        let v = a.eval(1.0, 0.25, &[]).unwrap().get(0, 0);
        assert!((v + 1.0).abs() < 1e-15);

        let c = tanh_c();
        assert_eq!(c.eval(1.0, 0.5, &[0.2, -0.2]).unwrap().get(0, 0), -1.0);
    }

    #[test]
    fn eval_rejects_phase_outside_period() {
        let f = CoefficientFn::scalar(1.0);
        assert!(matches!(f.eval(1.0, 1.0, &[]), Err(Error::PhaseOutOfRange { .. })));
        assert!(matches!(f.eval(1.0, -0.1, &[]), Err(Error::PhaseOutOfRange { .. })));
    }

    #[test]
    fn eval_rejects_evaluator_shape_drift() {
        let f = CoefficientFn::custom(CoeffKind::PathFunctional, 2, 2, 1.0, |_| Mat::scalar(1.0));
        assert!(matches!(f.eval(1.0, 0.0, &[]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn theta_shift_examples() {
        let p = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(theta_shift(&p, 0, 2).unwrap(), &p[..]);
        assert_eq!(theta_shift(&p, 1, 2).unwrap(), &[0.3, 0.4]);
        let once = theta_shift(theta_shift(&p, 1, 1).unwrap(), 1, 1).unwrap();
        assert_eq!(once, theta_shift(&p, 2, 1).unwrap());
        assert!(theta_shift(&p, 3, 2).is_err());
    }

    #[test]
    fn evaluation_ignores_earlier_periods() {
        let f = tanh_c();
        let spp = 4;
        let dt = 0.25;
        let p1 = [0.3, 0.1, -0.2, 0.5, 0.2, -0.1, 0.4, 0.0];
        let mut p2 = p1;
        p2[..4].copy_from_slice(&[-1.0, 2.0, 0.0, 0.7]);
        for node in 4..8 {
            let a = f.at(&point_at_node(&p1, node, spp, dt));
            let b = f.at(&point_at_node(&p2, node, spp, dt));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn positivity_examples() {
        let set = PeriodicCoefficientSet::new(
            "t",
            1.0,
            CoefficientFn::constant(Mat::zeros(1, 1)),
            CoefficientFn::constant(Mat::from_rows(&[vec![1.0, 0.0]])),
            CoefficientFn::scalar(1.0),
            CoefficientFn::constant(Mat::identity(2)),
        )
        .unwrap();
        let rep = check_positivity(&set, 10, 1).unwrap();
        assert_eq!(rep.margin_r, 1.0);

        let mut set2 = set.clone();
        set2.r = CoefficientFn::constant(Mat::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]));
        assert_eq!(check_positivity(&set2, 10, 1).unwrap().margin_r, 0.5);

        let scalar = PeriodicCoefficientSet::new(
            "t",
            1.0,
            CoefficientFn::scalar(-1.0),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
            CoefficientFn::scalar(1.0),
        )
        .unwrap()
        .with_cross_and_linear(
            CoefficientFn::scalar(1.0),
            CoefficientFn::zeros(1, 1),
            CoefficientFn::zeros(1, 1),
        )
        .unwrap();
        let rep = check_positivity(&scalar, 5, 3).unwrap();
        assert_eq!(rep.margin_qsrs, 0.0);
        assert!(!rep.passed);
    }

    #[test]
    fn positivity_flags_asymmetric_and_singular_input() {
        let mut set = builtin_scenario("planar-deterministic-periodic").unwrap();
        set.q = CoefficientFn::constant(Mat::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]));
        assert!(matches!(check_positivity(&set, 3, 0), Err(Error::NotSymmetric { .. })));
        let mut set = builtin_scenario("scalar-constant").unwrap();
        set.r = CoefficientFn::scalar(0.0);
        assert!(matches!(check_positivity(&set, 3, 0), Err(Error::Singular { .. })));
    }

    #[test]
    fn sampled_sup_within_declared_bound() {
        let f = CoefficientFn::tanh_of_increments(Mat::scalar(0.2), Mat::scalar(-0.7), 3.0).unwrap();
        let sup = sampled_sup(&f, 1.0, 200, 9);
        assert!(sup <= f.bound());
        assert!(sup > 0.5);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let f = tanh_c();
        let prefix = [0.1, 0.02, -0.3];
        let a = f.eval(1.0, 0.1, &prefix).unwrap();
        let b = f.eval(1.0, 0.1, &prefix).unwrap();
        assert_eq!(a.get(0, 0).to_bits(), b.get(0, 0).to_bits());
    }
}
