use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use laughlin_lab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        ll_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(ll_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn two_particle_energy() {
    let xy = [0.3, -0.2, -0.5, 0.4];
    let mut e = 0.0;
    assert_eq!(unsafe { ll_cleaned_hamiltonian(xy.as_ptr(), 2, &mut e) }, LlStatus::Ok);
    let trap = 0.3f64.powi(2) + 0.2f64.powi(2) + 0.5f64.powi(2) + 0.4f64.powi(2);
    let d = (0.8f64.powi(2) + 0.6f64.powi(2)).sqrt();
    let expected = 0.5 * std::f64::consts::PI * trap - d.ln();
    assert!((e - expected).abs() < 1e-14, "{e} vs {expected}");
}

#[test]
fn null_pointers_are_reported() {
    let mut e = 0.0;
    let s = unsafe { ll_cleaned_hamiltonian(ptr::null(), 3, &mut e) };
    assert_eq!(s, LlStatus::NullPointer);
    assert!(last_error().contains("xy"));
    let s = unsafe { ll_gap_compute(2, 2, 1, 0, ptr::null_mut()) };
    assert_eq!(s, LlStatus::NullPointer);
}

#[test]
fn coincident_points_have_infinite_energy() {
    let xy = [0.1, 0.1, 0.1, 0.1];
    let mut e = 0.0;
    assert_eq!(unsafe { ll_cleaned_hamiltonian(xy.as_ptr(), 2, &mut e) }, LlStatus::Ok);
    assert_eq!(e, f64::INFINITY);
}

#[test]
fn non_finite_coordinates_are_rejected() {
    let xy = [0.1, f64::NAN];
    let mut e = 0.0;
    assert_eq!(unsafe { ll_cleaned_hamiltonian(xy.as_ptr(), 1, &mut e) }, LlStatus::InvalidInput);
    assert!(last_error().contains("finite"));
}

#[test]
fn error_message_truncates_and_reports_length() {
    unsafe { ll_gap_compute(2, 2, 1, 0, ptr::null_mut()) };
    let need = unsafe { ll_last_error(ptr::null_mut(), 0) };
    assert_eq!(need, last_error().len() + 1);
    let mut small = [0x7f as std::ffi::c_char; 4];
    unsafe { ll_last_error(small.as_mut_ptr(), small.len()) };
    assert_eq!(small[3], 0);
}

#[test]
fn two_boson_gap() {
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(ll_gap_compute(2, 2, 2, 0, &mut h), LlStatus::Ok);
        let mut sigma = 0.0;
        assert_eq!(ll_gap_sigma(h, &mut sigma), LlStatus::Ok);
        assert!((sigma - 1.0).abs() < 1e-12);
        assert_eq!(ll_gap_sector_count(h), 3);
        let mut s = LlSectorGap { l: 0, dim: 0, zero_modes: 0, lowest_nonzero: 0.0 };
        assert_eq!(ll_gap_sector(h, 2, &mut s), LlStatus::Ok);
        assert_eq!((s.l, s.dim, s.zero_modes), (2, 2, 1));
        assert_eq!(ll_gap_sector(h, 3, &mut s), LlStatus::InvalidInput);
        ll_gap_free(h);
        ll_gap_free(ptr::null_mut());
    }
}

#[test]
fn invalid_gap_input() {
    let mut h = ptr::null_mut();
    let s = unsafe { ll_gap_compute(0, 2, 1, 0, &mut h) };
    assert_eq!(s, LlStatus::InvalidInput);
    assert!(h.is_null());
}

#[test]
fn unit_screening_disk() {
    let xy = [0.0, 0.0];
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(ll_screening_compute(xy.as_ptr(), 1, 0.05, &mut r), LlStatus::Ok);
        let mut area = 0.0;
        assert_eq!(ll_screening_area(r, &mut area), LlStatus::Ok);
        assert!((area - 1.0).abs() < 0.01, "area {area}");
        let mut g = LlGrid { x0: 0.0, y0: 0.0, spacing: 0.0, nx: 0, ny: 0 };
        assert_eq!(ll_screening_grid(r, &mut g), LlStatus::Ok);
        let mut occ = vec![0.0; g.nx * g.ny];
        assert_eq!(ll_screening_occupancy(r, occ.as_mut_ptr(), occ.len() - 1), LlStatus::BufferTooSmall);
        assert_eq!(ll_screening_occupancy(r, occ.as_mut_ptr(), occ.len()), LlStatus::Ok);
        let total: f64 = occ.iter().sum::<f64>() * g.spacing * g.spacing;
        assert!((total - area).abs() < 1e-9);
        ll_screening_free(r);
    }
}

#[test]
fn bathtub_fills_lowest_cells() {
    // 2x2 grid of unit cells, cap 1, mass 2.5
    let v = [3.0, 1.0, 0.0, 2.0];
    let mut rho = [9.0; 4];
    let mut e = 0.0;
    let s = unsafe { ll_bathtub_fill(v.as_ptr(), 2, 2, 1.0, 1.0, 2.5, rho.as_mut_ptr(), &mut e) };
    assert_eq!(s, LlStatus::Ok);
    assert_eq!(rho, [0.0, 1.0, 1.0, 0.5]);
    assert!((e - 2.0).abs() < 1e-12);
}

#[test]
fn over_capacity_bathtub_fails() {
    let v = [0.0; 4];
    let mut rho = [0.0; 4];
    let mut e = 0.0;
    let s = unsafe { ll_bathtub_fill(v.as_ptr(), 2, 2, 1.0, 1.0, 5.0, rho.as_mut_ptr(), &mut e) };
    assert_ne!(s, LlStatus::Ok);
}

#[test]
fn run_json_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(r#"{"subcommand": "gap", "config": {"n": 2, "ell": 2}}"#).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ll_run_json(cfg.as_ptr(), out.as_ptr()) }, LlStatus::Ok);
    assert!(dir.path().join("gaps.csv").exists());
    assert!(dir.path().join("gap.manifest.json").exists());
    let bad = CString::new(r#"{"subcommand": "gap", "config": {"bogus": 1}}"#).unwrap();
    assert_eq!(unsafe { ll_run_json(bad.as_ptr(), out.as_ptr()) }, LlStatus::InvalidInput);
}

#[test]
fn header_compiles_as_c_and_cxx() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include <laughlin_lab.h>\nint main(void) { LlSectorGap s; (void)s; return ll_version() == 0; }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include])
            .arg(&src)
            .status()
            .unwrap_or_else(|e| panic!("running {compiler}: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}
