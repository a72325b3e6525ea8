//! Acceptance suite A1-A10. Runs the library suite at its pinned options, then
//! re-derives each verdict from the reported metrics with the tolerances below.
//!
//! `cargo test -p ergolq --test acceptance`; pass criterion ids (`A3 A7`) after
//! `--` to run a subset.

use std::process::ExitCode;
use std::time::Instant;

use ergolq::verify::{run_suite, Criterion, CriterionResult, VerifyOptions};

const A1_REL: f64 = 0.02;
const A1_SE: f64 = 3.0;
const A2_REL: f64 = 0.05;
const A3_REL: f64 = 0.03;
const A3_MAX_OUTER: f64 = 10.0;
const A4_REL: f64 = 0.05;
const SE_MULT: f64 = 3.0;
const SUITE_LIMIT_S: f64 = 600.0;

fn limit_s(id: Criterion) -> Option<f64> {
    match id {
        Criterion::A1 => Some(30.0),
        Criterion::A2 | Criterion::A6 => Some(120.0),
        _ => None,
    }
}

fn finite(r: &CriterionResult, key: &str) -> Result<f64, String> {
    let v = r.metric(key);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("metric `{key}` missing"))
    }
}

fn check(r: &CriterionResult) -> Result<(), String> {
    let m = |k: &str| finite(r, k);
    let ensure = |ok: bool, what: String| if ok { Ok(()) } else { Err(what) };
    match r.id {
        Criterion::A1 => {
            for t in [0.5, 1.0] {
                let key = if t == 1.0 { "t1".to_string() } else { format!("t{t}") };
                let est = m(&format!("moment_{key}"))?;
                let se = m(&format!("stderr_{key}"))?;
                let exact = (-1.75f64 * t).exp();
                let tol = (A1_REL * exact).max(A1_SE * se);
                ensure((est - exact).abs() <= tol, format!("t={t}: {est} vs {exact} (tol {tol})"))?;
            }
            Ok(())
        }
        Criterion::A2 => {
            let e = m("max_relative_error")?;
            ensure(e < A2_REL, format!("relative error {e}"))
        }
        Criterion::A3 => {
            let k0 = m("k0")?;
            let exact = 2f64.sqrt() - 1.0;
            ensure(((k0 - exact) / exact).abs() <= A3_REL, format!("K0 {k0}"))?;
            ensure(m("outer_iterations")? <= A3_MAX_OUTER, "too many outer iterations".into())?;
            ensure(m("monotone")? == 1.0, "descent not monotone".into())
        }
        Criterion::A4 => {
            let k0 = m("k0")?;
            let exact = (5f64.sqrt() - 1.0) / 2.0;
            ensure(((k0 - exact) / exact).abs() <= A4_REL, format!("K0 {k0}"))
        }
        Criterion::A5 => {
            for name in ["scalar-constant", "scalar-noisy-constant"] {
                let lo = m(&format!("lambda_ci_low_{name}"))?;
                ensure(m(&format!("lambda_hat_{name}"))? > 0.0 && lo > 0.0, format!("{name}: CI low {lo}"))?;
            }
            Ok(())
        }
        Criterion::A6 => {
            let single_se = m("single_period_stderr")?;
            let se50 = m("stderr_50")?.hypot(single_se);
            let gap50 = (m("cost_50")? - m("single_period")?).abs();
            let gap10 = (m("cost_10")? - m("single_period")?).abs();
            ensure(gap50 < SE_MULT * se50, format!("gap50 {gap50} vs 3 SE {}", SE_MULT * se50))?;
            ensure(gap50 < gap10, format!("gap50 {gap50} >= gap10 {gap10}"))
        }
        Criterion::A7 => {
            let v = m("value")?;
            let v_se = m("value_stderr")?;
            let mc = m("mc_cost")?;
            let se = v_se.hypot(m("mc_stderr")?);
            ensure((v - mc).abs() <= SE_MULT * se, format!("V {v} vs MC {mc} (3 SE {})", SE_MULT * se))?;
            if r.metrics.contains_key("closed_form") {
                // 0.914214
                let exact = 2f64.sqrt() - 0.5;
                ensure((v - exact).abs() <= SE_MULT * v_se + 1e-9, format!("V {v} vs {exact}"))?;
            }
            Ok(())
        }
        Criterion::A8 => {
            ensure(m("argmin_epsilon")? == 0.0, "minimum not at epsilon = 0".into())?;
            ensure(m("kappa")? > 0.0 && m("kappa_ci_low")? > 0.0, "curvature not positive at 95%".into())?;
            ensure(m("all_above_value")? == 1.0, "a scan cost fell below V - 3 SE".into())
        }
        Criterion::A9 => {
            for name in ergolq::coefficients::catalog_names() {
                let hi = m(&format!("slope_ci_high_{name}"))?;
                ensure(m(&format!("slope_{name}"))? < 0.0 && hi < 0.0, format!("{name}: slope CI reaches {hi}"))?;
            }
            Ok(())
        }
        Criterion::A10 => {
            for i in 0..3 {
                let d = m(&format!("diff_{i}"))?;
                let se = m(&format!("diff_stderr_{i}"))?;
                ensure(d.abs() <= SE_MULT * se, format!("#{i}: lhs - rhs {d} beyond 3 SE {se}"))?;
                ensure(m(&format!("min_quadratic_{i}"))? >= 0.0, format!("#{i}: negative quadratic term"))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<Criterion> = Criterion::ALL
        .into_iter()
        .filter(|c| args.is_empty() || args.iter().any(|a| Criterion::parse(a) == Some(*c)))
        .collect();
    if std::env::args().any(|a| a == "--list") {
        for c in &selected {
            println!("{}: test", c.label());
        }
        return ExitCode::SUCCESS;
    }

    let opts = VerifyOptions::default();
    let start = Instant::now();
    let mut failures = 0;
    let report = run_suite(&opts, &selected, |r| {
        let verdict = check(r).and_then(|()| match limit_s(r.id) {
            Some(l) if r.seconds > l => Err(format!("took {:.1} s (limit {l} s)", r.seconds)),
            _ => Ok(()),
        });
        let ok = r.passed && verdict.is_ok();
        if !ok {
            failures += 1;
        }
        let note = match (&verdict, r.passed) {
            (Err(e), _) => format!(" [{e}]"),
            (Ok(()), false) => format!(" [suite verdict: {}]", r.error.as_deref().unwrap_or("fail")),
            _ => String::new(),
        };
        println!("{:<3} {} {:.1}s {}{}", r.id.label(), if ok { "PASS" } else { "FAIL" }, r.seconds, r.title, note);
    });
    let elapsed = start.elapsed().as_secs_f64();
    match report {
        Err(e) => {
            println!("suite error: {e}");
            ExitCode::FAILURE
        }
        Ok(rep) => {
            if rep.criteria.len() != selected.len() {
                failures += 1;
            }
            let over = selected.len() == Criterion::ALL.len() && elapsed > SUITE_LIMIT_S;
            println!(
                "acceptance: {}/{} passed in {elapsed:.1}s (limit {SUITE_LIMIT_S} s){}",
                rep.criteria.len() - failures.min(rep.criteria.len()),
                selected.len(),
                if over { ", over time" } else { "" }
            );
            if failures == 0 && !over {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
