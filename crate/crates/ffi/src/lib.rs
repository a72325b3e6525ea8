//! C ABI over the ergolq solvers.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free`. Every fallible call returns an [`ErgolqStatus`]; on
//! failure the message is kept per thread and read back with
//! [`ergolq_last_error_message`]. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ergolq::coefficients::{resolve_scenario, PathPoint, PeriodicCoefficientSet, ScenarioFile};
use ergolq::ergodic::{solve_optimal_chain, ChainOptions, OptimalChain};
use ergolq::{Error, Mat};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgolqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownScenario = 3,
    Numerical = 4,
    NotStabilizing = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A periodic coefficient set.
pub struct ErgolqScenario(PeriodicCoefficientSet);

/// Riccati solution, adjoint and optimal feedback for one scenario.
pub struct ErgolqSolution {
    chain: OptimalChain,
    n: usize,
    m: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ErgolqStatus, msg: impl Into<String>) -> ErgolqStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> ErgolqStatus {
    match e {
        Error::UnknownScenario(_) => ErgolqStatus::UnknownScenario,
        Error::NotStabilizing { .. } => ErgolqStatus::NotStabilizing,
        Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::PhaseOutOfRange { .. }
        | Error::ScenarioFormat(_)
        | Error::NotSymmetric { .. } => ErgolqStatus::InvalidArgument,
        _ => ErgolqStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), ErgolqStatus>) -> ErgolqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ErgolqStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(ErgolqStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: ergolq::Result<T>) -> Result<T, ErgolqStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, ErgolqStatus> {
    if p.is_null() {
        return Err(fail(ErgolqStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ErgolqStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, ErgolqStatus> {
    p.as_ref().ok_or_else(|| fail(ErgolqStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, ErgolqStatus> {
    p.as_mut().ok_or_else(|| fail(ErgolqStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_mat(m: &Mat, buf: *mut f64, len: usize) -> Result<(), ErgolqStatus> {
    if buf.is_null() {
        return Err(fail(ErgolqStatus::NullPointer, "output buffer is null"));
    }
    if len < m.len() {
        return Err(fail(
            ErgolqStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", m.len()),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(buf, m.len());
    for (k, d) in dst.iter_mut().enumerate() {
        *d = m.flat(k);
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ergolq_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, without the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn ergolq_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the number of bytes written, excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ergolq_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Loads a catalog scenario or a scenario TOML file by path.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_scenario_load(name: *const c_char, out_handle: *mut *mut ErgolqScenario) -> ErgolqStatus {
    guard(|| {
        let slot = out(out_handle, "out")?;
        *slot = ptr::null_mut();
        let set = lift(resolve_scenario(text(name, "name")?))?;
        *slot = Box::into_raw(Box::new(ErgolqScenario(set)));
        Ok(())
    })
}

/// Builds a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_scenario_from_toml(toml: *const c_char, out_handle: *mut *mut ErgolqScenario) -> ErgolqStatus {
    guard(|| {
        let slot = out(out_handle, "out")?;
        *slot = ptr::null_mut();
        let file = lift(ScenarioFile::parse(text(toml, "toml")?))?;
        *slot = Box::into_raw(Box::new(ErgolqScenario(lift(file.build())?)));
        Ok(())
    })
}

/// State dimension, control dimension and period.
///
/// # Safety
/// `scenario` must come from this library; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_scenario_dims(
    scenario: *const ErgolqScenario,
    n: *mut usize,
    m: *mut usize,
    tau: *mut f64,
) -> ErgolqStatus {
    guard(|| {
        let s = &handle(scenario, "scenario")?.0;
        *out(n, "n")? = s.n;
        *out(m, "m")? = s.m;
        *out(tau, "tau")? = s.tau;
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ergolq_scenario_free(scenario: *mut ErgolqScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Solves for the optimal feedback. `samples` is the number of regression
/// paths; 0 selects the default.
///
/// # Safety
/// `scenario` must come from this library; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solve_optimal(
    scenario: *const ErgolqScenario,
    seed: u64,
    steps_per_period: usize,
    samples: usize,
    out_handle: *mut *mut ErgolqSolution,
) -> ErgolqStatus {
    guard(|| {
        let slot = out(out_handle, "out")?;
        *slot = ptr::null_mut();
        let set = &handle(scenario, "scenario")?.0;
        let mut opts = ChainOptions {
            seed,
            steps_per_period,
            ..ChainOptions::default()
        };
        if samples > 0 {
            opts.samples = samples;
        }
        let chain = lift(solve_optimal_chain(set, &opts))?;
        *slot = Box::into_raw(Box::new(ErgolqSolution { chain, n: set.n, m: set.m }));
        Ok(())
    })
}

/// Writes the time-0 Riccati value `K0` (n x n).
///
/// # Safety
/// `solution` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_k0(solution: *const ErgolqSolution, buf: *mut f64, len: usize) -> ErgolqStatus {
    guard(|| write_mat(&handle(solution, "solution")?.chain.riccati.k.fixed_point, buf, len))
}

/// Writes the feedback gain at the start of a period (m x n).
///
/// # Safety
/// `solution` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_gain(solution: *const ErgolqSolution, buf: *mut f64, len: usize) -> ErgolqStatus {
    guard(|| {
        let fb = &handle(solution, "solution")?.chain.feedback;
        write_mat(&fb.theta.at(&PathPoint::new(0.0, &[])), buf, len)
    })
}

/// Writes the feedback offset at the start of a period (m x 1).
///
/// # Safety
/// `solution` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_offset(solution: *const ErgolqSolution, buf: *mut f64, len: usize) -> ErgolqStatus {
    guard(|| {
        let fb = &handle(solution, "solution")?.chain.feedback;
        write_mat(&fb.v.at(&PathPoint::new(0.0, &[])), buf, len)
    })
}

/// Number of outer policy iterations taken.
///
/// # Safety
/// `solution` must come from this library; `iterations` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_iterations(solution: *const ErgolqSolution, iterations: *mut usize) -> ErgolqStatus {
    guard(|| {
        let n = handle(solution, "solution")?.chain.riccati.trace.len();
        *out(iterations, "iterations")? = n;
        Ok(())
    })
}

/// Estimates the optimal ergodic cost with `paths` Monte Carlo paths.
///
/// # Safety
/// Both handles must come from this library and `solution` must have been
/// solved for `scenario`; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_value(
    solution: *const ErgolqSolution,
    scenario: *const ErgolqScenario,
    paths: usize,
    seed: u64,
    value: *mut f64,
    stderr: *mut f64,
) -> ErgolqStatus {
    guard(|| {
        let sol = handle(solution, "solution")?;
        let set = &handle(scenario, "scenario")?.0;
        if (set.n, set.m) != (sol.n, sol.m) {
            return Err(fail(ErgolqStatus::InvalidArgument, "solution was computed for a scenario of different dimensions"));
        }
        let v = lift(sol.chain.value(set, paths, seed))?;
        *out(value, "value")? = v.value;
        *out(stderr, "stderr")? = v.stderr;
        Ok(())
    })
}

/// # Safety
/// `solution` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn ergolq_solution_free(solution: *mut ErgolqSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Runs the command-line interface with `argv[0..argc]` (program name
/// first). Returns its exit code: 0 success, 1 failure, 2 configuration error.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ergolq_run_cli(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 0 {
        set_error("argv is null".into());
        return 2;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        match text(*argv.add(i), "argument") {
            Ok(s) => args.push(s.to_string()),
            Err(_) => return 2,
        }
    }
    catch_unwind(|| ergolq::cli::run_command(args)).unwrap_or_else(|_| {
        set_error("panic".into());
        1
    })
}
