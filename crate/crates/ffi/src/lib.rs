//! C interface to skel-tta.
//!
//! Every function returns a [`SkelStatus`]; outputs go through pointer
//! arguments. On failure a message is kept per thread and can be read with
//! [`skel_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use skel_tta::datasets::{AdaptConfig, AdaptMode};
use skel_tta::geometry::PointCloud;
use skel_tta::losses::SkeletalLossWeights;
use skel_tta::network::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use skel_tta::pipeline::{tokenize_for, AdaptSession};
use skel_tta::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkelStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    ContractViolation = 5,
    TrainingDiverged = 6,
    /// The output buffer is smaller than required.
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkelAdaptMode {
    OnlineBn = 0,
    OnlineBp = 1,
    Standard = 2,
}

/// A classifier with its skeletal heads.
pub struct SkelModel {
    model: Model,
}

/// An adaptation stream bound to a copy of a model.
pub struct SkelSession {
    session: AdaptSession,
    next_id: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SkelStatus {
    match e {
        Error::InvalidArgument(_) => SkelStatus::InvalidArgument,
        Error::ContractViolation(_) => SkelStatus::ContractViolation,
        Error::Format(_) | Error::Parse { .. } => SkelStatus::Format,
        Error::Io { .. } => SkelStatus::Io,
        Error::TrainingDiverged { .. } => SkelStatus::TrainingDiverged,
    }
}

struct Fail(SkelStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SkelStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SkelStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SkelStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SkelStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SkelStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn cloud_arg(points: *const f32, n_points: usize) -> Result<PointCloud, Fail> {
    if points.is_null() {
        return Err(null("points"));
    }
    let flat = std::slice::from_raw_parts(points, n_points.checked_mul(3).ok_or_else(|| null("points"))?);
    Ok(PointCloud::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())?)
}

unsafe fn out_ptr<T>(p: *mut T, what: &str) -> Result<&'static mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn skel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// without the terminator, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn skel_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Freshly initialized model with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skel_model_new(classes: usize, seed: u64, out: *mut *mut SkelModel) -> SkelStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = Model::new(ModelConfig {
            classes,
            seed,
            ..ModelConfig::default()
        })?;
        *out = Box::into_raw(Box::new(SkelModel { model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skel_model_load(path: *const c_char, out: *mut *mut SkelModel) -> SkelStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SkelModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn skel_model_save(model: *const SkelModel, path: *const c_char) -> SkelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_checkpoint(&m.model, &path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn skel_model_free(model: *mut SkelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes and number of skeletal spheres per cloud.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn skel_model_shape(model: *const SkelModel, classes: *mut usize, spheres: *mut usize) -> SkelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(classes, "classes")? = m.model.config().classes;
        *out_ptr(spheres, "spheres")? = m.model.config().patches;
        Ok(())
    })
}

/// Eval-mode class prediction for one cloud of `n_points` xyz triples.
///
/// # Safety
/// `points` must hold `3 * n_points` floats; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn skel_model_predict(
    model: *const SkelModel,
    points: *const f32,
    n_points: usize,
    label: *mut usize,
) -> SkelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let label = out_ptr(label, "label")?;
        let cloud = cloud_arg(points, n_points)?;
        let patches = tokenize_for(&m.model, &cloud)?;
        *label = m.model.predict(&[patches])?[0];
        Ok(())
    })
}

/// Predicted skeleton: `centers` receives `3 * spheres` floats and `radii`
/// `spheres` floats, where `spheres` comes from [`skel_model_shape`].
///
/// # Safety
/// `points` must hold `3 * n_points` floats; `centers` and `radii` must be
/// valid for `3 * capacity` and `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn skel_model_skeleton(
    model: *const SkelModel,
    points: *const f32,
    n_points: usize,
    centers: *mut f32,
    radii: *mut f32,
    capacity: usize,
) -> SkelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if centers.is_null() || radii.is_null() {
            return Err(null("output buffer"));
        }
        let cloud = cloud_arg(points, n_points)?;
        let need = m.model.config().patches;
        if capacity < need {
            return Err(Fail(
                SkelStatus::BufferTooSmall,
                format!("capacity {capacity} is below the {need} spheres produced"),
            ));
        }
        let patches = tokenize_for(&m.model, &cloud)?;
        let skel = m.model.forward_eval(&[patches])?.skeletons.remove(0);
        let c = std::slice::from_raw_parts_mut(centers, 3 * need);
        let r = std::slice::from_raw_parts_mut(radii, need);
        for (i, s) in skel.spheres().iter().enumerate() {
            c[3 * i..3 * i + 3].copy_from_slice(&s.center);
            r[i] = s.radius;
        }
        Ok(())
    })
}

/// Starts an adaptation session on a copy of `model`, with default settings
/// apart from the mode, view count, BatchNorm momentum and seed.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skel_session_new(
    model: *const SkelModel,
    mode: SkelAdaptMode,
    views: usize,
    momentum: f64,
    seed: u64,
    out: *mut *mut SkelSession,
) -> SkelStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_ptr(out, "out")?;
        let config = AdaptConfig {
            mode: match mode {
                SkelAdaptMode::OnlineBn => AdaptMode::OnlineBn,
                SkelAdaptMode::OnlineBp => AdaptMode::OnlineBp,
                SkelAdaptMode::Standard => AdaptMode::Standard,
            },
            views,
            momentum,
            ..AdaptConfig::default()
        };
        let session = AdaptSession::new(m.model.clone(), config, SkeletalLossWeights::default(), 8, seed)?;
        *out = Box::into_raw(Box::new(SkelSession { session, next_id: 0 }));
        Ok(())
    })
}

/// Adapts on one stream sample and writes its prediction. Samples are
/// numbered in arrival order; the number seeds the sample's views.
///
/// # Safety
/// `points` must hold `3 * n_points` floats; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn skel_session_step(
    session: *mut SkelSession,
    points: *const f32,
    n_points: usize,
    label: *mut usize,
) -> SkelStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let label = out_ptr(label, "label")?;
        let cloud = cloud_arg(points, n_points)?;
        let id = format!("stream_{:08}", s.next_id);
        let outcome = s.session.process(&[cloud], &[id])?;
        s.next_id += 1;
        *label = outcome.predictions[0];
        Ok(())
    })
}

/// Restores the source model and clears optimizer state.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn skel_session_reset(session: *mut SkelSession) -> SkelStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        s.session.reset();
        s.next_id = 0;
        Ok(())
    })
}

/// Copies the session's current adapted model into a new handle.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skel_session_model(session: *const SkelSession, out: *mut *mut SkelModel) -> SkelStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(SkelModel {
            model: s.session.live().clone(),
        }));
        Ok(())
    })
}

/// Releases a session; null is ignored.
///
/// # Safety
/// `session` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn skel_session_free(session: *mut SkelSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
