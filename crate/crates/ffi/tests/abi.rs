use std::ffi::{CStr, CString};
use std::ptr;

use ergolq_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; ergolq_last_error_length() + 1];
    unsafe { ergolq_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn load(name: &str) -> *mut ErgolqScenario {
    let name = CString::new(name).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { ergolq_scenario_load(name.as_ptr(), &mut h) };
    assert_eq!(st, ErgolqStatus::Ok, "{}", last_error());
    h
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ergolq_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn unknown_scenario_sets_status_and_message() {
    let name = CString::new("no-such-scenario").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { ergolq_scenario_load(name.as_ptr(), &mut h) };
    assert_eq!(st, ErgolqStatus::UnknownScenario);
    assert!(h.is_null());
    assert!(last_error().contains("no-such-scenario"));

    let mut small = [0 as std::ffi::c_char; 4];
    let n = unsafe { ergolq_last_error_message(small.as_mut_ptr(), small.len()) };
    assert_eq!(n, 3);
    assert_eq!(small[3], 0);
}

#[test]
fn null_arguments_are_rejected() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ergolq_scenario_load(ptr::null(), &mut h) }, ErgolqStatus::NullPointer);
    let (mut n, mut m, mut tau) = (0, 0, 0.0);
    assert_eq!(unsafe { ergolq_scenario_dims(ptr::null(), &mut n, &mut m, &mut tau) }, ErgolqStatus::NullPointer);
    unsafe {
        ergolq_scenario_free(ptr::null_mut());
        ergolq_solution_free(ptr::null_mut());
    }
}

#[test]
fn scalar_constant_solution_through_the_abi() {
    let sc = load("scalar-constant");
    let (mut n, mut m, mut tau) = (0, 0, 0.0);
    assert_eq!(unsafe { ergolq_scenario_dims(sc, &mut n, &mut m, &mut tau) }, ErgolqStatus::Ok);
    assert_eq!((n, m, tau), (1, 1, 1.0));

    let mut sol = ptr::null_mut();
    let st = unsafe { ergolq_solve_optimal(sc, 1, 32, 200, &mut sol) };
    assert_eq!(st, ErgolqStatus::Ok, "{}", last_error());
    assert_eq!(ergolq_last_error_length(), 0);

    let mut k0 = [0.0];
    assert_eq!(unsafe { ergolq_solution_k0(sol, k0.as_mut_ptr(), 1) }, ErgolqStatus::Ok);
    assert!((k0[0] - (2f64.sqrt() - 1.0)).abs() < 1e-4, "K0 {}", k0[0]);
    let mut gain = [0.0];
    assert_eq!(unsafe { ergolq_solution_gain(sol, gain.as_mut_ptr(), 1) }, ErgolqStatus::Ok);
    assert!((gain[0] + k0[0]).abs() < 1e-9);
    let mut offset = [0.0];
    assert_eq!(unsafe { ergolq_solution_offset(sol, offset.as_mut_ptr(), 1) }, ErgolqStatus::Ok);
    assert!((offset[0] + (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-3, "v {}", offset[0]);
    let mut iters = 0;
    assert_eq!(unsafe { ergolq_solution_iterations(sol, &mut iters) }, ErgolqStatus::Ok);
    assert!((1..=10).contains(&iters));

    assert_eq!(unsafe { ergolq_solution_k0(sol, k0.as_mut_ptr(), 0) }, ErgolqStatus::BufferTooSmall);

    let (mut v, mut se) = (0.0, 0.0);
    let st = unsafe { ergolq_solution_value(sol, sc, 500, 3, &mut v, &mut se) };
    assert_eq!(st, ErgolqStatus::Ok, "{}", last_error());
    assert!((v - (2f64.sqrt() - 0.5)).abs() < 1e-3 + 3.0 * se, "V {v} +- {se}");

    let planar = load("planar-deterministic-periodic");
    let st = unsafe { ergolq_solution_value(sol, planar, 500, 3, &mut v, &mut se) };
    assert_eq!(st, ErgolqStatus::InvalidArgument);
    unsafe {
        ergolq_scenario_free(planar);
        ergolq_solution_free(sol);
        ergolq_scenario_free(sc);
    }
}

#[test]
fn malformed_toml_is_invalid_argument() {
    let text = CString::new("name = \"x\"\ntau = -1\n").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { ergolq_scenario_from_toml(text.as_ptr(), &mut h) };
    assert_eq!(st, ErgolqStatus::InvalidArgument, "{}", last_error());
    assert!(h.is_null());
}

#[test]
fn cli_entry_point_returns_exit_codes() {
    let args: Vec<CString> = ["ergolq", "solve-riccati", "--scenario", "nope"]
        .iter()
        .map(|s| CString::new(*s).unwrap())
        .collect();
    let ptrs: Vec<_> = args.iter().map(|a| a.as_ptr()).collect();
    assert_eq!(unsafe { ergolq_run_cli(ptrs.len() as i32, ptrs.as_ptr()) }, 2);
    assert_eq!(unsafe { ergolq_run_cli(0, ptr::null()) }, 2);
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ergolq.h");
    let src = std::env::temp_dir().join(format!("ergolq-header-{}.c", std::process::id()));
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return ergolq_version() == 0; }}\n")).unwrap();
    let Ok(out) = std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output() else {
        eprintln!("no C compiler; skipping header check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
