//! C ABI over the dualtalker library.
//!
//! Models are opaque handles created by [`dt_model_load`] and released with
//! [`dt_model_free`]. Every fallible call returns a [`DtStatus`]; on failure
//! [`dt_last_error`] describes the most recent error on the calling thread.
//! Motion buffers are row-major `frames x vertices x 3` doubles, feature
//! buffers row-major `frames x bands`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dualtalker::data::{DataError, FeatureSequence, MotionSequence, RegionSet};
use dualtalker::diffcore::Tensor;
use dualtalker::metrics::{fdd, lip_vertex_error, MetricError};
use dualtalker::model::{load_checkpoint, DualTalker, ModelError};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    NonFinite = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct DtModel {
    inner: DualTalker,
}

/// Dimensions a caller needs to size buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DtModelInfo {
    pub vertices: usize,
    pub bands: usize,
    pub speakers: usize,
    pub max_frames: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(DtStatus, String);

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::NonFinite(_) => DtStatus::NonFinite,
            ref d if d.is_io() => DtStatus::Io,
            _ => DtStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Io { .. } | ModelError::Checkpoint(_) => DtStatus::Io,
            _ => DtStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure(DtStatus::InvalidArgument, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DtStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic for [`dt_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DtStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DtStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must point to `len` readable values when non-null.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must point to `len` writable values when non-null.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Failure(DtStatus::BufferTooSmall, format!("{what} holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `model` must be null or a live handle from [`dt_model_load`].
unsafe fn model_ref<'a>(model: *const DtModel) -> Result<&'a DualTalker, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn motion_from(data: &[f64], frames: usize, vertices: usize) -> Result<MotionSequence, Failure> {
    let t = Tensor::new(vec![frames, vertices, 3], data.to_vec()).map_err(|e| invalid(e.to_string()))?;
    Ok(MotionSequence::new(t, 30.0)?)
}

fn region(name: &str, indices: &[usize], vertices: usize) -> Result<RegionSet, Failure> {
    Ok(RegionSet::new(name, indices, vertices)?)
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn dt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_model_load(path: *const c_char, out: *mut *mut DtModel) -> DtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let (model, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(DtModel { inner: model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`dt_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dt_model_free(model: *mut DtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_model_info(model: *const DtModel, info: *mut DtModelInfo) -> DtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let c = m.config();
        *info = DtModelInfo {
            vertices: c.vertices,
            bands: c.audio_dim,
            speakers: c.speakers,
            max_frames: c.max_frames,
        };
        Ok(())
    })
}

/// Generates `frames x vertices x 3` displacements from `frames x bands`
/// features.
///
/// # Safety
/// `features` must hold `frames * bands` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn dt_generate_motion(
    model: *const DtModel,
    features: *const f64,
    frames: usize,
    bands: usize,
    speaker: usize,
    out: *mut f64,
    out_len: usize,
) -> DtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let input = slice(features, frames * bands, "features")?;
        let need = frames * m.config().vertices * 3;
        let out = slice_mut(out, out_len, need, "out")?;
        let t = Tensor::new(vec![frames, bands], input.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let motion = m.generate_motion(&FeatureSequence::new(t)?, speaker)?;
        out[..need].copy_from_slice(motion.displacements().data());
        Ok(())
    })
}

/// Generates `frames x bands` features from `frames x vertices x 3` motion.
///
/// # Safety
/// `motion` must hold `frames * vertices * 3` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn dt_generate_audio(
    model: *const DtModel,
    motion: *const f64,
    frames: usize,
    vertices: usize,
    speaker: usize,
    out: *mut f64,
    out_len: usize,
) -> DtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let input = slice(motion, frames * vertices * 3, "motion")?;
        let need = frames * m.config().audio_dim;
        let out = slice_mut(out, out_len, need, "out")?;
        let features = m.generate_audio(&motion_from(input, frames, vertices)?, speaker)?;
        out[..need].copy_from_slice(features.values().data());
        Ok(())
    })
}

/// Lip vertex error between two motion buffers over the given lip vertices.
///
/// # Safety
/// `pred` and `gt` must hold `frames * vertices * 3` values, `lips`
/// `n_lips` indices, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dt_lip_vertex_error(
    pred: *const f64,
    gt: *const f64,
    frames: usize,
    vertices: usize,
    lips: *const usize,
    n_lips: usize,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let n = frames * vertices * 3;
        let pred = motion_from(slice(pred, n, "pred")?, frames, vertices)?;
        let gt = motion_from(slice(gt, n, "gt")?, frames, vertices)?;
        let lips = region("lip", slice(lips, n_lips, "lips")?, vertices)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lip_vertex_error(&pred, &gt, &lips)?;
        Ok(())
    })
}

/// Upper-face dynamics deviation (signed) between ground truth and prediction.
///
/// # Safety
/// As [`dt_lip_vertex_error`], with `upper` holding `n_upper` indices.
#[no_mangle]
pub unsafe extern "C" fn dt_fdd(
    gt: *const f64,
    pred: *const f64,
    frames: usize,
    vertices: usize,
    upper: *const usize,
    n_upper: usize,
    out: *mut f64,
) -> DtStatus {
    guard(|| {
        let n = frames * vertices * 3;
        let gt = motion_from(slice(gt, n, "gt")?, frames, vertices)?;
        let pred = motion_from(slice(pred, n, "pred")?, frames, vertices)?;
        let upper = region("upper", slice(upper, n_upper, "upper")?, vertices)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = fdd(&gt, &pred, &upper)?;
        Ok(())
    })
}
