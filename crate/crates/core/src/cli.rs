//! Command-line front end. Every subcommand validates its configuration,
//! computes all results in memory, then writes the manifest followed by the
//! outputs, so a failed run leaves the output directory untouched.

use crate::bsde::{RegressionBasis, SampleSet};
use crate::coefficients::{CoefficientFn, FeedbackLaw, PeriodicCoefficientSet};
use crate::config::{Command, FeedbackChoice, Overrides, RunConfig, MANIFEST_FILE};
use crate::ergodic::{
    default_basis, ergodic_report, optimality_scan, solve_optimal_chain, suggested_k_burn, ChainOptions, ErgodicOptions, OptimalChain,
    Perturbation, ScanSetup,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::riccati::{find_stabilizer, riccati_residual, solve_stochastic_riccati, stabilizer_check, RiccatiOptions};
use crate::sde::{derive_seed, simulate_closed_loop, simulate_fundamental, write_moments_csv, InitialState, PathBundle, Recording};
use crate::verify::{run_suite_on, Criterion, VerifyOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ergolq", version, about = "Ergodic LQ control with random periodic coefficients")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Catalog scenario name or scenario TOML file.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Run configuration (TOML or JSON), or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (default 0; 7 for verify).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Time steps per period.
    #[arg(long, global = true)]
    steps_per_period: Option<usize>,
    /// Periods to simulate.
    #[arg(long, global = true)]
    periods: Option<usize>,
    /// Output directory (default: $ERGOLQ_OUT_ROOT/<command>-<scenario>-seed<seed>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fixed-point tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate closed-loop trajectories and estimate moment decay.
    Simulate {
        #[arg(long, value_enum)]
        feedback: Option<FeedbackFlag>,
        /// Simulate the fundamental solution instead of the state.
        #[arg(long)]
        fundamental: bool,
    },
    /// Solve the periodic stochastic Riccati equation.
    SolveRiccati,
    /// Estimate the ergodic cost of a feedback three ways.
    ErgodicCost {
        #[arg(long, value_enum)]
        feedback: Option<FeedbackFlag>,
    },
    /// Run the acceptance suite; exit 0 iff every criterion passes.
    Verify {
        /// Comma-separated subset, e.g. A1,A3.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<String>,
    },
    /// Scan perturbations of the optimal feedback.
    Scan,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FeedbackFlag {
    Optimal,
    Stabilizer,
    Zero,
}

impl From<FeedbackFlag> for FeedbackChoice {
    fn from(f: FeedbackFlag) -> Self {
        match f {
            FeedbackFlag::Optimal => FeedbackChoice::Optimal,
            FeedbackFlag::Stabilizer => FeedbackChoice::Stabilizer,
            FeedbackFlag::Zero => FeedbackChoice::Zero,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (command, cfg) = match configure(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let set = match cfg.resolve(command) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let cfg = cfg.resolved(command, &set);
    let prepared = match prepare(command, &cfg, &set) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(command, &cfg, &set, prepared) {
        Ok(run) => {
            let dir = cfg.output_dir(command, &set.name);
            if let Err(e) = write_outputs(&dir, &cfg, command, &run) {
                eprintln!("error: writing {}: {e}", dir.display());
                return EXIT_FAILED;
            }
            for line in &run.report {
                println!("{line}");
            }
            println!("outputs: {}", dir.display());
            if run.passed {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn configure(cli: &Cli) -> Result<(Command, RunConfig)> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    cfg.apply(&Overrides {
        scenario: c.scenario.clone(),
        seed: c.seed,
        n_paths: c.paths,
        steps_per_period: c.steps_per_period,
        n_periods: c.periods,
        out: c.out.clone(),
        tol: c.tol,
    });
    let command = match &cli.command {
        Cmd::Simulate { feedback, fundamental } => {
            if let Some(f) = feedback {
                cfg.simulate.feedback = (*f).into();
            }
            cfg.simulate.fundamental |= *fundamental;
            Command::Simulate
        }
        Cmd::SolveRiccati => Command::SolveRiccati,
        Cmd::ErgodicCost { feedback } => {
            if let Some(f) = feedback {
                cfg.ergodic.feedback = (*f).into();
            }
            Command::ErgodicCost
        }
        Cmd::Verify { criteria } => {
            if !criteria.is_empty() {
                cfg.verify.criteria = criteria.clone();
            }
            Command::Verify
        }
        Cmd::Scan => Command::Scan,
    };
    Ok((command, cfg))
}

/// Configuration checks that need the scenario: shapes of configured
/// feedbacks, initial states and scan directions.
enum Prepared {
    Simulate(Option<FeedbackLaw>),
    Ergodic(Option<FeedbackLaw>),
    Scan(Vec<Perturbation>),
    Other,
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<Mat> {
    if v.len() != len {
        return Err(Error::ShapeMismatch {
            what: what.into(),
            expected: (len, 1),
            actual: (v.len(), 1),
        });
    }
    Ok(Mat::column(v))
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<Mat> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::ShapeMismatch {
            what: what.into(),
            expected: shape,
            actual: (rows.len(), rows.first().map_or(0, Vec::len)),
        });
    }
    Ok(Mat::from_rows(rows))
}

/// Builds every feedback except the optimal one, which needs the solves.
fn static_feedback(choice: &FeedbackChoice, set: &PeriodicCoefficientSet) -> Result<Option<FeedbackLaw>> {
    Ok(match choice {
        FeedbackChoice::Optimal | FeedbackChoice::Stabilizer => None,
        FeedbackChoice::Zero => Some(FeedbackLaw::zero(set.n, set.m)),
        FeedbackChoice::Constant { gain, offset } => Some(FeedbackLaw::new(
            "constant",
            CoefficientFn::constant(matrix(gain, (set.m, set.n), "feedback gain")?),
            CoefficientFn::constant(vector(offset, set.m, "feedback offset")?),
        )),
    })
}

fn prepare(command: Command, cfg: &RunConfig, set: &PeriodicCoefficientSet) -> Result<Prepared> {
    let periods = cfg.n_periods.unwrap_or(1);
    match command {
        Command::Simulate => {
            if let Some(x) = &cfg.simulate.x0 {
                vector(x, set.n, "x0")?;
            }
            if periods < 3 {
                return Err(Error::InvalidArgument("simulate needs at least 3 periods for the decay fit".into()));
            }
            Ok(Prepared::Simulate(static_feedback(&cfg.simulate.feedback, set)?))
        }
        Command::ErgodicCost => {
            if let Some(x) = &cfg.ergodic.x0 {
                vector(x, set.n, "x0")?;
            }
            if cfg.n_paths.unwrap_or(2) < 2 {
                return Err(Error::InvalidArgument("ergodic-cost needs at least 2 paths".into()));
            }
            if cfg.ergodic.k_burn == Some(0) {
                return Err(Error::InvalidArgument("k_burn must be at least 1".into()));
            }
            Ok(Prepared::Ergodic(static_feedback(&cfg.ergodic.feedback, set)?))
        }
        Command::Scan => {
            let sc = &cfg.scan;
            if sc.epsilons.is_empty() || sc.epsilons.iter().any(|e| !e.is_finite()) {
                return Err(Error::InvalidArgument("scan needs finite epsilons".into()));
            }
            if cfg.scan.k_burn == Some(0) {
                return Err(Error::InvalidArgument("k_burn must be at least 1".into()));
            }
            let d_theta = match &sc.d_theta {
                Some(rows) => matrix(rows, (set.m, set.n), "d_theta")?,
                None => Mat::filled(set.m, set.n, 1.0),
            };
            let d_v = match &sc.d_v {
                Some(v) => vector(v, set.m, "d_v")?,
                None => Mat::zeros(set.m, 1),
            };
            Ok(Prepared::Scan(
                sc.epsilons
                    .iter()
                    .map(|&epsilon| Perturbation { d_theta, d_v, epsilon })
                    .collect(),
            ))
        }
        Command::SolveRiccati | Command::Verify => Ok(Prepared::Other),
    }
}

/// Results of a run, ready to be written.
struct RunOutput {
    summary_schema: &'static str,
    /// `(file name, contents)`; the summary comes first.
    files: Vec<(String, Vec<u8>)>,
    report: Vec<String>,
    passed: bool,
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn csv<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn chain_options(cfg: &RunConfig, set: &PeriodicCoefficientSet) -> ChainOptions {
    ChainOptions {
        seed: cfg.seed(),
        steps_per_period: cfg.steps_per_period,
        samples: if set.is_deterministic() { 1000 } else { 8000 },
        tol: cfg.tol,
        basis: basis(cfg, set),
        ..ChainOptions::default()
    }
}

fn basis(cfg: &RunConfig, set: &PeriodicCoefficientSet) -> Option<RegressionBasis> {
    Some(match cfg.degree {
        Some(d) => RegressionBasis {
            degree: d,
            ..RegressionBasis::default()
        },
        None => default_basis(set),
    })
}

fn stability_bundle(cfg: &RunConfig, set: &PeriodicCoefficientSet) -> Result<PathBundle> {
    PathBundle::new(set.tau, cfg.steps_per_period, 10, 2000, derive_seed(cfg.seed(), "stability"))
}

fn stabilizer_feedback(set: &PeriodicCoefficientSet, cfg: &RunConfig) -> Result<FeedbackLaw> {
    let theta = match &set.stabilizer {
        Some(t) => t.clone(),
        None => find_stabilizer(set, &stability_bundle(cfg, set)?)?.0,
    };
    Ok(FeedbackLaw::new("stabilizer", theta, CoefficientFn::zeros(set.m, 1)))
}

fn execute(command: Command, cfg: &RunConfig, set: &PeriodicCoefficientSet, prepared: Prepared) -> Result<RunOutput> {
    match (command, prepared) {
        (Command::Simulate, Prepared::Simulate(fb)) => simulate(cfg, set, fb),
        (Command::SolveRiccati, _) => solve(cfg, set),
        (Command::ErgodicCost, Prepared::Ergodic(fb)) => ergodic(cfg, set, fb),
        (Command::Scan, Prepared::Scan(p)) => scan(cfg, set, &p),
        (Command::Verify, _) => verify(cfg, set),
        _ => unreachable!("prepare returns the variant of its command"),
    }
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    schema: &'static str,
    scenario: &'a str,
    feedback_id: String,
    fundamental: bool,
    n_paths: usize,
    n_periods: usize,
    steps_per_period: usize,
    seed: u64,
    n_overflow: usize,
    stability: crate::sde::StabilityReport,
    final_second_moment: crate::stats::Estimate,
}

/// Above this many stored states only period ends are recorded.
const MAX_RECORDED_STATES: usize = 20_000_000;

fn simulate(cfg: &RunConfig, set: &PeriodicCoefficientSet, fb: Option<FeedbackLaw>) -> Result<RunOutput> {
    let fb = match fb {
        Some(f) => f,
        None => match cfg.simulate.feedback {
            FeedbackChoice::Optimal => solve_optimal_chain(set, &chain_options(cfg, set))?.feedback,
            _ => stabilizer_feedback(set, cfg)?,
        },
    };
    let n = cfg.n_paths.unwrap_or(1);
    let periods = cfg.n_periods.unwrap_or(1);
    let bundle = PathBundle::new(set.tau, cfg.steps_per_period, periods, n, derive_seed(cfg.seed(), "simulate"))?;
    let states = n * (bundle.total_steps() + 1) * set.n * if cfg.simulate.fundamental { set.n } else { 1 };
    let rec = if states <= MAX_RECORDED_STATES { Recording::All } else { Recording::PeriodEnds };
    let x0 = InitialState::Fixed(match &cfg.simulate.x0 {
        Some(x) => Mat::column(x),
        None => Mat::zeros(set.n, 1),
    });
    let run = |b: &PathBundle, r: &Recording| {
        if cfg.simulate.fundamental {
            simulate_fundamental(set, Some(&fb), b, r)
        } else {
            simulate_closed_loop(set, &fb, &x0, b, r)
        }
    };
    let traj = run(&bundle, &rec)?;
    let export = PathBundle {
        n_paths: n.min(cfg.simulate.export_paths.max(1)),
        ..bundle
    };
    let export_traj = run(&export, &Recording::All)?;
    let stability = stabilizer_check(&fb.theta, set, &bundle)?;
    let moments = traj.moment_rows();
    let summary = SimulateSummary {
        schema: "ergolq.simulate/1",
        scenario: &set.name,
        feedback_id: fb.id.clone(),
        fundamental: cfg.simulate.fundamental,
        n_paths: n,
        n_periods: periods,
        steps_per_period: cfg.steps_per_period,
        seed: cfg.seed(),
        n_overflow: traj.overflow_count(),
        stability,
        final_second_moment: traj.second_moment(traj.nodes.len() - 1),
    };
    let report = vec![format!(
        "{}: lambda_hat {:.4} (95% CI [{:.4}, {:.4}]), stable {}, overflowed paths {}",
        set.name, stability.lambda_hat, stability.lambda_ci95[0], stability.lambda_ci95[1], stability.stable, summary.n_overflow
    )];
    Ok(RunOutput {
        summary_schema: summary.schema,
        files: vec![
            ("summary.json".into(), json(&summary)?),
            ("moments.csv".into(), csv(|w| write_moments_csv(&moments, w))?),
            ("trajectories.csv".into(), csv(|w| export_traj.write_csv(w))?),
        ],
        report,
        passed: true,
    })
}

fn solve(cfg: &RunConfig, set: &PeriodicCoefficientSet) -> Result<RunOutput> {
    let n = cfg.n_paths.unwrap_or(1);
    let samples = SampleSet::from_bundle(&PathBundle::new(set.tau, cfg.steps_per_period, 1, n, derive_seed(cfg.seed(), "regression"))?);
    let opts = RiccatiOptions {
        tol: cfg.tol,
        basis: basis(cfg, set).unwrap_or_default(),
        ..RiccatiOptions::default()
    };
    let sol = solve_stochastic_riccati(set, set.stabilizer.as_ref(), &samples, &stability_bundle(cfg, set)?, &opts)?;
    let fresh = PathBundle::new(set.tau, cfg.steps_per_period, 1, n.min(4000), derive_seed(cfg.seed(), "residual"))?;
    let residual = riccati_residual(&sol, set, &fresh)?;
    let header = sol.header(Some(&residual));
    let report = vec![format!(
        "{}: K0 = {:?}, {} outer iterations, monotone {}, residual {:.3e} (bias {:.3e}, floor {:.3e})",
        set.name,
        sol.k0().entries().collect::<Vec<_>>(),
        sol.outer_iterations(),
        sol.is_monotone(),
        residual.residual,
        residual.bias,
        residual.floor
    )];
    Ok(RunOutput {
        summary_schema: "ergolq.riccati/1",
        files: vec![
            ("summary.json".into(), json(&header)?),
            ("riccati_k.csv".into(), csv(|w| sol.k.write_csv(w))?),
            ("riccati_theta.csv".into(), csv(|w| sol.write_theta_csv(set, w))?),
        ],
        report,
        passed: true,
    })
}

fn ergodic(cfg: &RunConfig, set: &PeriodicCoefficientSet, fb: Option<FeedbackLaw>) -> Result<RunOutput> {
    let (fb, value) = match (fb, &cfg.ergodic.feedback) {
        (Some(f), _) => (f, None),
        (None, FeedbackChoice::Optimal) => {
            let chain = solve_optimal_chain(set, &chain_options(cfg, set))?;
            let v = chain.value(set, 4000, cfg.seed())?;
            (chain.feedback, Some(v))
        }
        (None, _) => (stabilizer_feedback(set, cfg)?, None),
    };
    let e = &cfg.ergodic;
    let opts = ErgodicOptions {
        n_paths: cfg.n_paths.unwrap_or(1),
        steps_per_period: cfg.steps_per_period,
        seed: cfg.seed(),
        horizon_periods: cfg.n_periods.unwrap_or(1),
        short_horizon_periods: e.short_horizon,
        k_burn: e.k_burn,
        x_start: e.x0.clone(),
        antithetic: e.antithetic,
        ..ErgodicOptions::default()
    };
    let rep = ergodic_report(set, &fb, value, &opts)?;
    let mut rows = vec![
        ("long-run", rep.cost_longrun),
        ("single-period", rep.cost_single_period),
    ];
    if let Some(s) = rep.cost_short_horizon {
        rows.insert(1, ("short-horizon", s));
    }
    let table = csv(|w| {
        use std::io::Write;
        writeln!(w, "estimator,value,stderr,periods,n_paths,n_overflow")?;
        for (name, c) in &rows {
            writeln!(w, "{name},{},{},{},{},{}", c.value, c.stderr, c.periods, c.n_paths, c.n_overflow)?;
        }
        if let Some(v) = &rep.value_v {
            writeln!(w, "value,{},{},1,0,0", v.value, v.stderr)?;
        }
        Ok(())
    })?;
    let mut report: Vec<String> = rows
        .iter()
        .map(|(name, c)| format!("{name}: {:.6} +- {:.6}", c.value, c.stderr))
        .collect();
    if let Some(v) = &rep.value_v {
        report.push(format!("value: {:.6} +- {:.2e}", v.value, v.stderr));
    }
    report.extend(rep.flags.iter().map(|f| format!("flag: {f}")));
    Ok(RunOutput {
        summary_schema: "ergolq.ergodic/1",
        files: vec![("summary.json".into(), json(&rep)?), ("costs.csv".into(), table)],
        report,
        passed: true,
    })
}

#[derive(Serialize)]
struct ScanSummary<'a> {
    schema: &'static str,
    scenario: &'a str,
    seed: u64,
    n_paths: usize,
    k_burn: usize,
    value: crate::ergodic::ValueEstimate,
    /// Every stable scanned cost is at least `V − 3·stderr`.
    all_above_value: bool,
    perturbations: &'a [Perturbation],
    table: crate::ergodic::ScanTable,
}

fn scan(cfg: &RunConfig, set: &PeriodicCoefficientSet, perts: &[Perturbation]) -> Result<RunOutput> {
    let chain: OptimalChain = solve_optimal_chain(set, &chain_options(cfg, set))?;
    let value = chain.value(set, 4000, cfg.seed())?;
    let n = cfg.n_paths.unwrap_or(1);
    let k_burn = match cfg.scan.k_burn {
        Some(k) => k,
        None => {
            let rep = stabilizer_check(&chain.feedback.theta, set, &stability_bundle(cfg, set)?)?;
            suggested_k_burn(rep.lambda_hat, set.tau)?
        }
    };
    let b = |periods: usize, label: &str| PathBundle::new(set.tau, cfg.steps_per_period, periods, n, derive_seed(cfg.seed(), label));
    let setup = ScanSetup {
        burn: b(k_burn + 1, "scan-burn")?,
        fresh: b(1, "scan-fresh")?,
        stability: stability_bundle(cfg, set)?,
        x_start: Mat::zeros(set.n, 1),
        k_burn,
    };
    let table = optimality_scan(set, &chain.riccati, &chain.eta, perts, &setup)?;
    let all_above_value = table.rows.iter().all(|r| !r.stable || r.cost >= value.value - 3.0 * r.stderr);
    let mut report: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("epsilon {:+}: cost {:.6} +- {:.6} stable {}", r.epsilon, r.cost, r.stderr, r.stable))
        .collect();
    report.push(format!("value {:.6}; argmin {:?}; kappa {:?}", value.value, table.argmin_epsilon, table.kappa.map(|k| k.value)));
    let scan_csv = csv(|w| table.write_csv(w))?;
    let summary = ScanSummary {
        schema: "ergolq.scan/1",
        scenario: &set.name,
        seed: cfg.seed(),
        n_paths: n,
        k_burn,
        value,
        all_above_value,
        perturbations: perts,
        table,
    };
    Ok(RunOutput {
        summary_schema: summary.schema,
        files: vec![("summary.json".into(), json(&summary)?), ("scan.csv".into(), scan_csv)],
        report,
        passed: true,
    })
}

fn verify(cfg: &RunConfig, set: &PeriodicCoefficientSet) -> Result<RunOutput> {
    let criteria: Vec<Criterion> = if cfg.verify.criteria.is_empty() {
        Criterion::ALL.to_vec()
    } else {
        cfg.verify.criteria.iter().filter_map(|c| Criterion::parse(c)).collect()
    };
    let opts = VerifyOptions {
        seed: cfg.seed(),
        scenario: set.name.clone(),
        ergodic_paths: cfg.n_paths.unwrap_or(VerifyOptions::default().ergodic_paths),
        steps_per_period: cfg.steps_per_period,
        tol: cfg.tol,
        degree: cfg.degree,
    };
    let suite = run_suite_on(&opts, set.clone(), &criteria, |r| println!("{}", r.line()))?;
    let report = vec![format!(
        "suite {} in {:.1} s (limit {:.0} s)",
        if suite.passed { "PASSED" } else { "FAILED" },
        suite.seconds,
        suite.time_limit
    )];
    let metrics = csv(|w| {
        use std::io::Write;
        writeln!(w, "criterion,metric,value")?;
        for c in &suite.criteria {
            writeln!(w, "{},passed,{}", c.id.label(), u8::from(c.passed))?;
            for (k, v) in &c.metrics {
                writeln!(w, "{},{k},{v}", c.id.label())?;
            }
        }
        Ok(())
    })?;
    let timings = csv(|w| {
        use std::io::Write;
        writeln!(w, "criterion,seconds,time_limit")?;
        for c in &suite.criteria {
            writeln!(w, "{},{},{}", c.id.label(), c.seconds, c.time_limit.map_or(String::new(), |l| l.to_string()))?;
        }
        writeln!(w, "suite,{},{}", suite.seconds, suite.time_limit)?;
        Ok(())
    })?;
    Ok(RunOutput {
        summary_schema: crate::verify::SCHEMA,
        passed: suite.passed,
        files: vec![
            ("summary.json".into(), json(&suite)?),
            ("metrics.csv".into(), metrics),
            ("timings.csv".into(), timings),
        ],
        report,
    })
}

/// Creates `dir`, writes the manifest, then the outputs.
fn write_outputs(dir: &Path, cfg: &RunConfig, command: Command, run: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = cfg.manifest(command, run.summary_schema);
    std::fs::write(dir.join(MANIFEST_FILE), json(&manifest)?)?;
    for (name, bytes) in &run.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
