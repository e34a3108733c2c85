use std::ffi::CString;
use std::process::Command;
use std::ptr;

use sobotrim_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { sbt_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[test]
fn sphere_projection_round_trip() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sbt_manifold_sphere(2, &mut m) }, SbtStatus::Ok);
    let mut nu = 0;
    assert_eq!(unsafe { sbt_manifold_ambient_dim(m, &mut nu) }, SbtStatus::Ok);
    assert_eq!(nu, 3);
    let y = [0.0, 3.0, 4.0];
    let mut out = [0.0; 3];
    assert_eq!(unsafe { sbt_manifold_project(m, y.as_ptr(), out.as_mut_ptr(), 3) }, SbtStatus::Ok);
    assert!((out[1] - 0.6).abs() < 1e-12 && (out[2] - 0.8).abs() < 1e-12);
    let origin = [0.0; 3];
    assert_eq!(unsafe { sbt_manifold_project(m, origin.as_ptr(), out.as_mut_ptr(), 3) }, SbtStatus::NumericalFailure);
    assert!(last_error().contains("tubular"));
    unsafe { sbt_manifold_free(m) };
}

#[test]
fn null_and_invalid_arguments() {
    assert_eq!(unsafe { sbt_manifold_sphere(2, ptr::null_mut()) }, SbtStatus::NullPointer);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sbt_manifold_funnel_sphere(2, 0.9, &mut m) }, SbtStatus::InvalidInput);
    assert!(m.is_null());
    assert!(last_error().contains("α"));
    let mut u = ptr::null_mut();
    let bad = CString::new("{\"kind\":\"nope\"}").unwrap();
    assert_eq!(unsafe { sbt_gridmap_builtin(bad.as_ptr(), 2, 9, 1.0, &mut u) }, SbtStatus::InvalidInput);
    unsafe {
        sbt_gridmap_free(ptr::null_mut());
        sbt_manifold_free(ptr::null_mut());
    }
}

#[test]
fn identity_energy_and_degree() {
    let res = 65usize;
    let mut vals = Vec::with_capacity(res * res * 2);
    for i in 0..res {
        for j in 0..res {
            vals.push(-1.0 + 2.0 * i as f64 / (res - 1) as f64);
            vals.push(-1.0 + 2.0 * j as f64 / (res - 1) as f64);
        }
    }
    let mut u = ptr::null_mut();
    assert_eq!(unsafe { sbt_gridmap_new(2, res, 1.0, 2, vals.as_ptr(), vals.len(), &mut u) }, SbtStatus::Ok);
    let (mut n, mut nu) = (0, 0);
    assert_eq!(unsafe { sbt_gridmap_shape(u, &mut n, &mut nu) }, SbtStatus::Ok);
    assert_eq!((n, nu), (res * res, 2));
    let mut e = 0.0;
    assert_eq!(unsafe { sbt_energy(u, 2.0, &mut e) }, SbtStatus::Ok);
    assert!((e - 8.0).abs() < 1e-9);
    let y = [0.01, -0.02];
    for method in [0, 1] {
        let mut d = 0;
        assert_eq!(unsafe { sbt_brouwer_degree(u, 0.5, y.as_ptr(), method, &mut d) }, SbtStatus::Ok);
        assert_eq!(d, 1);
    }
    let mut back = vec![0.0; vals.len()];
    assert_eq!(unsafe { sbt_gridmap_values(u, back.as_mut_ptr(), back.len()) }, SbtStatus::Ok);
    assert_eq!(back, vals);
    unsafe { sbt_gridmap_free(u) };
}

#[test]
fn builtin_map_approximation() {
    let spec = CString::new("{\"kind\":\"angular\"}").unwrap();
    let mut u = ptr::null_mut();
    assert_eq!(unsafe { sbt_gridmap_builtin(spec.as_ptr(), 2, 129, 1.0, &mut u) }, SbtStatus::Ok);
    let mut s1 = ptr::null_mut();
    assert_eq!(unsafe { sbt_manifold_sphere(1, &mut s1) }, SbtStatus::Ok);
    let law = CString::new("{}").unwrap();
    let mut out = ptr::null_mut();
    let mut rel = f64::NAN;
    let st = unsafe { sbt_approximate(u, s1, 1.5, law.as_ptr(), 0.05, &mut out, &mut rel) };
    assert_eq!(st, SbtStatus::Ok, "{}", last_error());
    assert!(rel < 0.05);
    let mut v = ptr::null_mut();
    // Plain mollification averages the vortex to a point near the origin of R².
    assert_eq!(unsafe { sbt_mollify_project(u, s1, 0.05, &mut v) }, SbtStatus::NumericalFailure);
    assert!(v.is_null());
    unsafe {
        sbt_gridmap_free(out);
        sbt_gridmap_free(v);
        sbt_gridmap_free(u);
        sbt_manifold_free(s1);
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sobotrim.h");
    let text = std::fs::read_to_string(header).expect("header written by the build script");
    assert!(text.contains("sbt_approximate") && text.contains("SBT_STATUS_NULL_POINTER"));
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ SbtStatus s = SBT_STATUS_OK; return (int)s; }}\n")).unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(&src).status() {
        Ok(st) => assert!(st.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler on PATH; syntax check skipped"),
    }
}
