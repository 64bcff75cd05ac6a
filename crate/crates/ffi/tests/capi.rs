use std::ffi::{CStr, CString};
use std::ptr;

use polyspline_ffi::*;

fn last_error() -> String {
    let p = ps_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(dim: usize, n: usize, cells: usize, degree: usize) -> *mut PsModel {
    let mut m = ptr::null_mut();
    let st = unsafe { ps_model_new(dim, n, cells, degree, 7, &mut m) };
    assert_eq!(st, PsStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn create_query_and_free() {
    let m = new_model(2, 3, 2, 1);
    unsafe {
        assert_eq!(ps_model_dim(m), 2);
        assert_eq!(ps_model_n_coeffs(m), 2 * 3);
        ps_model_free(m);
        ps_model_free(ptr::null_mut());
        assert_eq!(ps_model_dim(ptr::null()), 0);
    }
}

#[test]
fn constant_expert_evaluates_to_constant() {
    // With B = 0 and every coefficient equal, the partition of unity makes y constant.
    let m = new_model(1, 4, 3, 0);
    unsafe {
        let c = vec![2.5; ps_model_n_coeffs(m)];
        assert_eq!(ps_model_set_coeffs(m, c.as_ptr(), c.len()), PsStatus::Ok);
        let xs = [0.0, 0.13, 0.5, 0.77, 1.0];
        let mut y = [0.0; 5];
        let mut g = [1.0; 5];
        assert_eq!(ps_model_eval(m, xs.as_ptr(), 5, y.as_mut_ptr(), g.as_mut_ptr()), PsStatus::Ok);
        for (v, d) in y.iter().zip(&g) {
            assert!((v - 2.5).abs() < 1e-13);
            assert!(d.abs() < 1e-12);
        }
        let mut back = vec![0.0; c.len()];
        assert_eq!(ps_model_get_coeffs(m, back.as_mut_ptr(), back.len()), PsStatus::Ok);
        assert_eq!(back, c);
        ps_model_free(m);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ps_model_new(3, 4, 2, 1, 0, &mut m), PsStatus::InvalidArgument);
        assert!(m.is_null());
        assert!(last_error().contains("dimension"));
        assert_eq!(ps_model_new(1, 4, 2, 1, 0, ptr::null_mut()), PsStatus::NullPointer);

        let m = new_model(1, 4, 2, 1);
        assert!(ps_last_error().is_null());
        let c = [1.0; 3];
        assert_eq!(ps_model_set_coeffs(m, c.as_ptr(), c.len()), PsStatus::DimensionMismatch);
        let mut out = [0.0; 3];
        assert_eq!(ps_model_get_coeffs(m, out.as_mut_ptr(), 3), PsStatus::InvalidArgument);

        let xs = [1.5];
        let mut y = [0.0];
        assert_eq!(ps_model_eval(m, xs.as_ptr(), 1, y.as_mut_ptr(), ptr::null_mut()), PsStatus::OutOfDomain);
        assert_eq!(ps_model_eval(m, ptr::null(), 1, y.as_mut_ptr(), ptr::null_mut()), PsStatus::NullPointer);
        assert_eq!(ps_model_eval(ptr::null(), xs.as_ptr(), 1, y.as_mut_ptr(), ptr::null_mut()), PsStatus::NullPointer);

        let bad = CString::new("p9").unwrap();
        assert_eq!(ps_model_train(m, bad.as_ptr(), PsLsgdMode::Layer, 1, 0, ptr::null_mut()), PsStatus::InvalidArgument);
        ps_model_free(m);
    }
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    let m = new_model(1, 6, 3, 2);
    unsafe {
        let n = ps_model_n_coeffs(m);
        let c: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        assert_eq!(ps_model_set_coeffs(m, c.as_ptr(), n), PsStatus::Ok);
        assert_eq!(ps_model_save(m, path.as_ptr()), PsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ps_model_load(path.as_ptr(), &mut back), PsStatus::Ok);

        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let mut y0 = vec![0.0; 50];
        let mut y1 = vec![0.0; 50];
        assert_eq!(ps_model_eval(m, xs.as_ptr(), 50, y0.as_mut_ptr(), ptr::null_mut()), PsStatus::Ok);
        assert_eq!(ps_model_eval(back, xs.as_ptr(), 50, y1.as_mut_ptr(), ptr::null_mut()), PsStatus::Ok);
        assert_eq!(y0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(ps_model_load(missing.as_ptr(), &mut other), PsStatus::Io);
        ps_model_free(m);
        ps_model_free(back);
    }
}

#[test]
fn training_reduces_regression_loss() {
    let m = new_model(1, 4, 2, 1);
    let name = CString::new("p1-sine").unwrap();
    unsafe {
        let mut short = 0.0;
        assert_eq!(ps_model_train(m, name.as_ptr(), PsLsgdMode::Layer, 1, 1, &mut short), PsStatus::Ok);
        let mut long = 0.0;
        assert_eq!(ps_model_train(m, name.as_ptr(), PsLsgdMode::Callback, 40, 1, &mut long), PsStatus::Ok);
        assert!(long.is_finite() && long <= short, "{long} > {short}");
        ps_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/polyspline.h")).unwrap();
    for name in [
        "typedef struct PsModel PsModel",
        "PS_STATUS_OK = 0",
        "ps_last_error",
        "ps_model_new",
        "ps_model_load",
        "ps_model_save",
        "ps_model_free",
        "ps_model_eval",
        "ps_model_train",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
