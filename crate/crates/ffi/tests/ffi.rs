use std::ffi::{CStr, CString};
use std::ptr;

use selfcomp_ffi::*;

fn last_error() -> String {
    let p = sc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn build(scale: f64, seed: u64) -> *mut ScNetwork {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sc_network_build(scale, seed, &mut h) }, ScStatus::Ok);
    assert!(!h.is_null());
    h
}

fn forward(h: *const ScNetwork, images: &[f32], n: usize) -> Vec<f32> {
    let (mut shape, mut classes) = ([0usize; 3], 0usize);
    assert_eq!(unsafe { sc_network_shape(h, shape.as_mut_ptr(), &mut classes) }, ScStatus::Ok);
    let mut out = vec![0f32; n * classes];
    assert_eq!(unsafe { sc_network_forward(h, images.as_ptr(), n, out.as_mut_ptr()) }, ScStatus::Ok);
    out
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { sc_string_free(p) };
    s
}

#[test]
fn quantize_matches_core() {
    let x = [-3.3f32, -0.5, 0.0, 0.74, 1.5, 2.5, 9.0];
    let mut out = [0f32; 7];
    assert_eq!(unsafe { sc_quantize(x.as_ptr(), x.len(), 3.0, -1.0, out.as_mut_ptr()) }, ScStatus::Ok);
    for (o, v) in out.iter().zip(x) {
        assert_eq!(*o, selfcomp::quantizer::quantize_value(v, 3.0, -1.0).unwrap());
    }
    assert_eq!(out, [-2.0, -0.5, 0.0, 0.5, 1.5, 1.5, 1.5]);
}

#[test]
fn quantize_backward_matches_core() {
    let x = [-3.0f32, 0.2, 0.9, 4.0];
    let up = [1.0f32, 2.0, -1.0, 0.5];
    let (mut dx, mut db, mut de) = ([0f32; 4], 0f32, 0f32);
    let status = unsafe {
        sc_quantize_backward(up.as_ptr(), x.as_ptr(), 4, 2.0, 0.0, dx.as_mut_ptr(), &mut db, &mut de)
    };
    assert_eq!(status, ScStatus::Ok);
    let t = |v: &[f32]| selfcomp::tensor::Tensor::from_vec(v.to_vec());
    let (gx, gb, ge) = selfcomp::quantizer::quantize_backward(&t(&up), &t(&x), 2.0, 0.0).unwrap();
    assert_eq!(dx.as_slice(), gx.data());
    assert_eq!((db, de), (gb, ge));
    assert_eq!(dx, [0.0, 2.0, -1.0, 0.0]);
}

#[test]
fn negative_bits_is_an_invalid_argument() {
    let x = [1.0f32];
    let mut out = [0f32];
    assert_eq!(
        unsafe { sc_quantize(x.as_ptr(), 1, -1.0, 0.0, out.as_mut_ptr()) },
        ScStatus::InvalidArgument
    );
    assert!(last_error().contains("non-negative"));
}

#[test]
fn null_pointers_are_reported() {
    let mut out = [0f32; 2];
    assert_eq!(unsafe { sc_quantize(ptr::null(), 2, 4.0, 0.0, out.as_mut_ptr()) }, ScStatus::NullPointer);
    assert!(last_error().contains("`x`"));
    assert_eq!(unsafe { sc_network_build(0.25, 0, ptr::null_mut()) }, ScStatus::NullPointer);
    assert_eq!(unsafe { sc_network_save(ptr::null(), c"x".as_ptr()) }, ScStatus::NullPointer);
    unsafe { sc_network_free(ptr::null_mut()) };
    unsafe { sc_string_free(ptr::null_mut()) };
}

#[test]
fn build_forward_save_load() {
    let h = build(0.125, 3);
    let n = 2;
    let images: Vec<f32> = (0..n * 3 * 32 * 32).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let before = forward(h, &images, n);
    assert_eq!(before.len(), 20);
    assert!(before.iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sc_network_save(h, path.as_ptr()) }, ScStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { sc_network_load(path.as_ptr(), &mut loaded) }, ScStatus::Ok);
    assert_eq!(forward(loaded, &images, n), before);
    unsafe {
        sc_network_free(h);
        sc_network_free(loaded);
    }
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sc_network_load(path.as_ptr(), &mut h) }, ScStatus::Checkpoint);
    assert!(h.is_null());
    assert!(last_error().contains("absent"));
}

#[test]
fn size_report_json() {
    let h = build(0.125, 0);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { sc_network_size_report_json(h, ScSizeMode::Simple, &mut s) }, ScStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(s)).unwrap();
    assert_eq!(v["mode"], "simple");
    assert!(v["Q"].as_f64().unwrap() > 0.0);
    assert_eq!(v["layers"].as_array().unwrap().len(), 9);
    unsafe { sc_network_free(h) };
}

#[test]
fn prune_of_fresh_network_removes_nothing() {
    let h = build(0.125, 0);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { sc_network_prune(h, 1e-5, 0, &mut s) }, ScStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(s)).unwrap();
    assert_eq!(v["weights_removed"], 0);
    assert_eq!(unsafe { sc_network_prune(h, f32::NAN, 0, ptr::null_mut()) }, ScStatus::InvalidArgument);
    unsafe { sc_network_free(h) };
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/selfcomp.h");
    for name in [
        "sc_last_error_message",
        "sc_quantize",
        "sc_quantize_backward",
        "sc_network_build",
        "sc_network_load",
        "sc_network_save",
        "sc_network_free",
        "sc_network_shape",
        "sc_network_forward",
        "sc_network_size_report_json",
        "sc_network_prune",
        "sc_string_free",
        "typedef struct ScNetwork ScNetwork",
        "SC_STATUS_PRESERVATION = 8",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
