//! C interface to trained `cerd` checkpoints.
//!
//! A model is loaded from a checkpoint file into an opaque handle. Every call
//! returns a [`CerdStatus`]; on failure a description is kept per thread and can be
//! copied out with [`cerd_last_error_message`].
//!
//! Subject features are passed as one pointer per modality, in the checkpoint's
//! modality order. A null pointer marks a missing modality.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cerd::autograd::Tape;
use cerd::checkpoint::Checkpoint;
use cerd::model::ForwardOptions;
use cerd::tokenize::SubjectView;
use cerd::{CerdError, CerdModel};

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CerdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was out of range (index, buffer length, UTF-8 path).
    InvalidArgument = 2,
    /// Configuration or parameter error in the checkpoint.
    Configuration = 3,
    /// File could not be read or parsed.
    Io = 4,
    /// Checkpoint incompatible with this library or with the input.
    Compatibility = 5,
    /// Input data violated a contract (for example, no observed modality).
    Data = 6,
    /// Internal consistency failure.
    Internal = 7,
    /// A panic was caught at the boundary.
    Panic = 8,
}

/// Opaque model handle.
pub struct CerdModelHandle {
    model: CerdModel,
    classes: Vec<std::ffi::CString>,
    modalities: Vec<std::ffi::CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &CerdError) -> CerdStatus {
    match e {
        CerdError::Parameter(_) | CerdError::Configuration(_) => CerdStatus::Configuration,
        CerdError::Io { .. } | CerdError::Json(_) | CerdError::Csv(_) => CerdStatus::Io,
        CerdError::Compatibility(_) | CerdError::Dimension(_) => CerdStatus::Compatibility,
        CerdError::DataIntegrity(_)
        | CerdError::Alignment(_)
        | CerdError::Label(_)
        | CerdError::Stratification(_)
        | CerdError::Contract(_) => CerdStatus::Data,
        CerdError::Evaluation(_) | CerdError::Divergence(_) | CerdError::Consistency(_) => CerdStatus::Internal,
    }
}

struct Failure(CerdStatus, String);

impl From<CerdError> for Failure {
    fn from(e: CerdError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CerdStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(CerdStatus::InvalidArgument, msg)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CerdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CerdStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cerd");
            CerdStatus::Panic
        }
    }
}

unsafe fn handle<'a>(h: *const CerdModelHandle) -> Result<&'a CerdModelHandle, Failure> {
    // SAFETY: the caller passes a handle from `cerd_model_load` that has not been freed.
    unsafe { h.as_ref() }.ok_or_else(|| null("model"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(invalid(format!("`{what}` holds {len} values, {need} required")));
    }
    // SAFETY: `p` is non-null and the caller guarantees `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, need) })
}

/// Builds the subject from per-modality pointers (null = missing) and runs the forward pass.
unsafe fn forward(
    h: &CerdModelHandle,
    features: *const *const f64,
) -> Result<(Tape, cerd::model::SubjectOutput), Failure> {
    if features.is_null() {
        return Err(null("features"));
    }
    let dims = &h.model.catalog.dims;
    let mut rows = Vec::with_capacity(dims.len());
    let mut mask = Vec::with_capacity(dims.len());
    for (m, &d) in dims.iter().enumerate() {
        // SAFETY: the caller passes one pointer per modality.
        let p = unsafe { *features.add(m) };
        if p.is_null() {
            rows.push(&[][..]);
            mask.push(false);
        } else {
            // SAFETY: a non-null modality pointer addresses `d` readable values.
            rows.push(unsafe { std::slice::from_raw_parts(p, d) });
            mask.push(true);
        }
    }
    let view = SubjectView {
        id: "ffi",
        features: rows,
        mask: &mask,
        label: 0,
    };
    let mut tape = Tape::new();
    let out = h.model.forward_subject(&mut tape, &view, ForwardOptions::default())?;
    Ok((tape, out))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cerd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, excluding the NUL.
#[no_mangle]
pub extern "C" fn cerd_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (truncated, always NUL-terminated when
/// `len > 0`). Returns the full message length, excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cerd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            // SAFETY: `buf` holds `len > n` writable bytes.
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a checkpoint. On success `*out` receives a handle to release with [`cerd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_load(path: *const c_char, out: *mut *mut CerdModelHandle) -> CerdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: the caller passes a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8".into()))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let model = ckpt.to_model()?;
        let cstrings = |v: &[String]| {
            v.iter()
                .map(|s| std::ffi::CString::new(s.as_str()).map_err(|_| invalid(format!("name `{s}` contains NUL"))))
                .collect::<Result<Vec<_>, _>>()
        };
        let h = CerdModelHandle {
            classes: cstrings(&ckpt.classes)?,
            modalities: cstrings(&ckpt.modalities)?,
            model,
        };
        // SAFETY: `out` is non-null and writable.
        unsafe { *out = Box::into_raw(Box::new(h)) };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`cerd_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_free(model: *mut CerdModelHandle) {
    if !model.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in `cerd_model_load`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of modalities the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_num_modalities(model: *const CerdModelHandle, out: *mut usize) -> CerdStatus {
    guard(|| {
        let h = unsafe { handle(model) }?;
        // SAFETY: checked non-null; the caller guarantees it is writable.
        unsafe { out.as_mut() }.map(|o| *o = h.modalities.len()).ok_or_else(|| null("out"))
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_num_classes(model: *const CerdModelHandle, out: *mut usize) -> CerdStatus {
    guard(|| {
        let h = unsafe { handle(model) }?;
        // SAFETY: as above.
        unsafe { out.as_mut() }.map(|o| *o = h.classes.len()).ok_or_else(|| null("out"))
    })
}

/// Feature dimension of modality `index`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_modality_dim(model: *const CerdModelHandle, index: usize, out: *mut usize) -> CerdStatus {
    guard(|| {
        let h = unsafe { handle(model) }?;
        let d = *h
            .model
            .catalog
            .dims
            .get(index)
            .ok_or_else(|| invalid(format!("modality index {index} out of range")))?;
        // SAFETY: as above.
        unsafe { out.as_mut() }.map(|o| *o = d).ok_or_else(|| null("out"))
    })
}

/// Name of modality `index`, valid while the handle lives. Null when out of range.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_modality_name(model: *const CerdModelHandle, index: usize) -> *const c_char {
    // SAFETY: the caller passes a live handle or null.
    match unsafe { model.as_ref() }.and_then(|h| h.modalities.get(index)) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

/// Name of class `index`, valid while the handle lives. Null when out of range.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_class_name(model: *const CerdModelHandle, index: usize) -> *const c_char {
    // SAFETY: the caller passes a live handle or null.
    match unsafe { model.as_ref() }.and_then(|h| h.classes.get(index)) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

/// Class probabilities for one subject.
///
/// `features` holds one pointer per modality (null when missing), each addressing
/// that modality's raw feature values. `probs` receives `num_classes` values.
///
/// # Safety
/// Pointers must be valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_predict(
    model: *const CerdModelHandle,
    features: *const *const f64,
    probs: *mut f64,
    probs_len: usize,
) -> CerdStatus {
    guard(|| {
        let h = unsafe { handle(model) }?;
        let c = h.classes.len();
        let dst = unsafe { out_slice(probs, probs_len, c, "probs") }?;
        let (tape, out) = unsafe { forward(h, features) }?;
        let p = cerd::autograd::softmax(tape.value(out.logits).data(), 1.0)?;
        dst.copy_from_slice(&p);
        Ok(())
    })
}

/// Additive evidence decomposition for one subject:
/// `logits[c] = shared[c] + Σ_m contributions[m * C + c]`.
///
/// `logits` and `shared` receive `C` values, `contributions` `M × C` (row-major by
/// modality) and `weights` `M` values. Fails with `COMPATIBILITY` for models
/// trained with the plain head.
///
/// # Safety
/// Pointers must be valid for the sizes described above.
#[no_mangle]
pub unsafe extern "C" fn cerd_model_attribute(
    model: *const CerdModelHandle,
    features: *const *const f64,
    logits: *mut f64,
    shared: *mut f64,
    contributions: *mut f64,
    weights: *mut f64,
) -> CerdStatus {
    guard(|| {
        let h = unsafe { handle(model) }?;
        let (m, c) = (h.modalities.len(), h.classes.len());
        let logits = unsafe { out_slice(logits, c, c, "logits") }?;
        let shared = unsafe { out_slice(shared, c, c, "shared") }?;
        let contributions = unsafe { out_slice(contributions, m * c, m * c, "contributions") }?;
        let weights = unsafe { out_slice(weights, m, m, "weights") }?;
        let (tape, out) = unsafe { forward(h, features) }?;
        let a = out.attribution.ok_or_else(|| {
            Failure(CerdStatus::Compatibility, "model has no evidence decomposition head".into())
        })?;
        logits.copy_from_slice(tape.value(a.logits).data());
        shared.copy_from_slice(tape.value(a.shared_contribution).data());
        contributions.copy_from_slice(tape.value(a.contributions).data());
        weights.copy_from_slice(tape.value(a.weights).data());
        Ok(())
    })
}
