use std::ffi::{CStr, CString};
use std::ptr;

use skel_tta_ffi::*;

fn sphere_cloud(n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * n);
    let golden = std::f32::consts::PI * (3.0 - 5f32.sqrt());
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f32 + 0.5) / n as f32;
        let r = (1.0 - y * y).sqrt();
        let t = golden * i as f32;
        out.extend([r * t.cos(), y, r * t.sin()]);
    }
    out
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        skel_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn new_model(classes: usize) -> *mut SkelModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { skel_model_new(classes, 5, &mut m) }, SkelStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(skel_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn predict_and_skeleton_round_trip() {
    let m = new_model(4);
    let (mut classes, mut spheres) = (0, 0);
    assert_eq!(unsafe { skel_model_shape(m, &mut classes, &mut spheres) }, SkelStatus::Ok);
    assert_eq!(classes, 4);
    let cloud = sphere_cloud(256);
    let mut label = usize::MAX;
    assert_eq!(unsafe { skel_model_predict(m, cloud.as_ptr(), 256, &mut label) }, SkelStatus::Ok);
    assert!(label < 4);

    let mut centers = vec![0f32; 3 * spheres];
    let mut radii = vec![0f32; spheres];
    let st = unsafe { skel_model_skeleton(m, cloud.as_ptr(), 256, centers.as_mut_ptr(), radii.as_mut_ptr(), spheres) };
    assert_eq!(st, SkelStatus::Ok);
    assert!(radii.iter().all(|r| r.is_finite() && *r > 0.0));
    assert!(centers.iter().all(|c| c.is_finite()));

    let st = unsafe {
        skel_model_skeleton(m, cloud.as_ptr(), 256, centers.as_mut_ptr(), radii.as_mut_ptr(), spheres - 1)
    };
    assert_eq!(st, SkelStatus::BufferTooSmall);
    assert!(last_error().contains("capacity"));
    unsafe { skel_model_free(m) };
}

#[test]
fn save_load_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.spck").to_str().unwrap()).unwrap();
    let m = new_model(3);
    assert_eq!(unsafe { skel_model_save(m, path.as_ptr()) }, SkelStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { skel_model_load(path.as_ptr(), &mut loaded) }, SkelStatus::Ok);
    let cloud = sphere_cloud(200);
    let (mut a, mut b) = (0, 0);
    unsafe {
        skel_model_predict(m, cloud.as_ptr(), 200, &mut a);
        skel_model_predict(loaded, cloud.as_ptr(), 200, &mut b);
        skel_model_free(m);
        skel_model_free(loaded);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { skel_model_load(ptr::null(), &mut m) }, SkelStatus::NullPointer);
    assert!(last_error().contains("null"));

    let missing = CString::new("/nonexistent/dir/m.spck").unwrap();
    assert_eq!(unsafe { skel_model_load(missing.as_ptr(), &mut m) }, SkelStatus::Io);
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.spck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { skel_model_load(junk.as_ptr(), &mut m) }, SkelStatus::Format);

    assert_eq!(unsafe { skel_model_new(1, 0, &mut m) }, SkelStatus::InvalidArgument);

    let model = new_model(2);
    let bad = [0.0f32, f32::NAN, 0.0];
    let mut label = 0;
    assert_eq!(unsafe { skel_model_predict(model, bad.as_ptr(), 1, &mut label) }, SkelStatus::InvalidArgument);
    unsafe { skel_model_free(model) };
}

#[test]
fn success_clears_the_last_error() {
    let mut m = ptr::null_mut();
    unsafe { skel_model_load(ptr::null(), &mut m) };
    assert!(!last_error().is_empty());
    let model = new_model(2);
    assert_eq!(unsafe { skel_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { skel_model_free(model) };
}

#[test]
fn long_messages_are_truncated_with_terminator() {
    let mut m = ptr::null_mut();
    unsafe { skel_model_load(ptr::null(), &mut m) };
    let mut buf = [1 as std::ffi::c_char; 4];
    let full = unsafe { skel_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn session_steps_and_resets() {
    let model = new_model(3);
    let mut s = ptr::null_mut();
    let st = unsafe { skel_session_new(model, SkelAdaptMode::OnlineBn, 4, 0.1, 9, &mut s) };
    assert_eq!(st, SkelStatus::Ok);
    let cloud: Vec<f32> = sphere_cloud(128).iter().map(|v| v * 1.5 + 0.2).collect();
    let mut label = usize::MAX;
    assert_eq!(unsafe { skel_session_step(s, cloud.as_ptr(), 128, &mut label) }, SkelStatus::Ok);
    assert!(label < 3);

    let mut adapted = ptr::null_mut();
    assert_eq!(unsafe { skel_session_model(s, &mut adapted) }, SkelStatus::Ok);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.spck"), dir.path().join("b.spck"));
    let ca = CString::new(pa.to_str().unwrap()).unwrap();
    let cb = CString::new(pb.to_str().unwrap()).unwrap();
    unsafe { skel_model_save(model, ca.as_ptr()) };
    unsafe { skel_model_save(adapted, cb.as_ptr()) };
    assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    assert_eq!(unsafe { skel_session_reset(s) }, SkelStatus::Ok);
    let mut reset = ptr::null_mut();
    unsafe { skel_session_model(s, &mut reset) };
    unsafe { skel_model_save(reset, cb.as_ptr()) };
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    unsafe {
        skel_model_free(adapted);
        skel_model_free(reset);
        skel_session_free(s);
        skel_model_free(model);
    }
}

#[test]
fn single_view_batchnorm_session_is_rejected() {
    let model = new_model(2);
    let mut s = ptr::null_mut();
    let st = unsafe { skel_session_new(model, SkelAdaptMode::OnlineBn, 1, 0.1, 0, &mut s) };
    assert_eq!(st, SkelStatus::InvalidArgument);
    assert!(s.is_null());
    unsafe { skel_model_free(model) };
}

#[test]
fn free_accepts_null() {
    unsafe {
        skel_model_free(ptr::null_mut());
        skel_session_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/skel_tta.h")).unwrap();
    for name in [
        "SKEL_TTA_H",
        "SKEL_STATUS_OK = 0",
        "SKEL_STATUS_PANIC",
        "SKEL_ADAPT_MODE_ONLINE_BN",
        "typedef struct SkelModel SkelModel",
        "typedef struct SkelSession SkelSession",
        "skel_model_load(const char *path, struct SkelModel **out)",
        "skel_session_step(",
        "skel_last_error_message(char *buf, size_t len)",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
