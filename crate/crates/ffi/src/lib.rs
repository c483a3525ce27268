//! C ABI for sodkit.
//!
//! Every fallible function returns a status code (`SODKIT_OK` on success) and
//! writes results through out-pointers. After a failure,
//! `sodkit_last_error_message` describes it; the pointer stays valid until
//! the next sodkit call on the same thread. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sodkit::interrater::{build_rating_matrix, fleiss_kappa, interpret_kappa, AgreementLevel, KappaResult, RatingMatrix, StoredSession};
use sodkit::trainer::{Prediction, TrainedModel};
use sodkit::{ClassLabel, Error, ScoringMethod};

pub const SODKIT_OK: i32 = 0;
/// A required pointer was null or a string was not UTF-8.
pub const SODKIT_ERR_ARGUMENT: i32 = 1;
/// The input violated a documented precondition.
pub const SODKIT_ERR_VALIDATION: i32 = 2;
pub const SODKIT_ERR_NOT_FOUND: i32 = 3;
pub const SODKIT_ERR_IO: i32 = 4;
/// All ratings fell in one category; kappa is undefined.
pub const SODKIT_ERR_DEGENERATE: i32 = 5;
/// An output buffer is too small.
pub const SODKIT_ERR_BUFFER: i32 = 6;
pub const SODKIT_ERR_INTERNAL: i32 = 7;

pub const SODKIT_LEVEL_NONE: i32 = 0;
pub const SODKIT_LEVEL_SLIGHT: i32 = 1;
pub const SODKIT_LEVEL_FAIR: i32 = 2;
pub const SODKIT_LEVEL_MODERATE: i32 = 3;
pub const SODKIT_LEVEL_SUBSTANTIAL: i32 = 4;
pub const SODKIT_LEVEL_ALMOST_PERFECT: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

enum Failure {
    Argument(String),
    Buffer(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn status_of(e: &Error) -> i32 {
    match e {
        Error::NotFound(_) | Error::UnknownRater(_) | Error::SchemaNotFound(_) => SODKIT_ERR_NOT_FOUND,
        Error::Io { .. } => SODKIT_ERR_IO,
        Error::DegenerateAgreement => SODKIT_ERR_DEGENERATE,
        e if e.is_validation() => SODKIT_ERR_VALIDATION,
        Error::Decode { .. } => SODKIT_ERR_VALIDATION,
        _ => SODKIT_ERR_INTERNAL,
    }
}

/// Runs `body`, converting errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SODKIT_OK,
        Ok(Err(Failure::Argument(msg))) => {
            set_last_error(msg);
            SODKIT_ERR_ARGUMENT
        }
        Ok(Err(Failure::Buffer(msg))) => {
            set_last_error(msg);
            SODKIT_ERR_BUFFER
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            SODKIT_ERR_INTERNAL
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Argument(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Argument(format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Argument(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::Argument(format!("{name} is null")))
}

/// Message for the last failed call on this thread, or null.
#[no_mangle]
pub extern "C" fn sodkit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sodkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SodkitKappa {
    pub kappa: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// One of the `SODKIT_LEVEL_*` constants.
    pub level: i32,
    pub items: usize,
    pub raters: usize,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
}

fn level_code(level: AgreementLevel) -> i32 {
    match level {
        AgreementLevel::None => SODKIT_LEVEL_NONE,
        AgreementLevel::Slight => SODKIT_LEVEL_SLIGHT,
        AgreementLevel::Fair => SODKIT_LEVEL_FAIR,
        AgreementLevel::Moderate => SODKIT_LEVEL_MODERATE,
        AgreementLevel::Substantial => SODKIT_LEVEL_SUBSTANTIAL,
        AgreementLevel::AlmostPerfect => SODKIT_LEVEL_ALMOST_PERFECT,
    }
}

impl From<&KappaResult> for SodkitKappa {
    fn from(r: &KappaResult) -> Self {
        SodkitKappa {
            kappa: r.kappa,
            se: r.se,
            z: r.z,
            p_value: r.p_value,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            level: level_code(r.level),
            items: r.items,
            raters: r.raters,
            observed_agreement: r.observed_agreement,
            expected_agreement: r.expected_agreement,
        }
    }
}

/// Fleiss' kappa for a row-major `items x categories` count matrix.
///
/// # Safety
/// `counts` must point to `items * categories` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_fleiss_kappa(
    counts: *const u32,
    items: usize,
    categories: usize,
    out: *mut SodkitKappa,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = items
            .checked_mul(categories)
            .ok_or_else(|| Failure::Argument("matrix size overflows".into()))?;
        let flat = slice_arg(counts, len, "counts")?;
        if categories == 0 {
            return Err(Failure::Argument("categories must be positive".into()));
        }
        let rows = flat.chunks(categories).map(<[u32]>::to_vec).collect();
        let labels = (0..categories).map(|j| ClassLabel::new(format!("{j}"))).collect();
        let result = fleiss_kappa(&RatingMatrix::from_counts(labels, rows)?)?;
        *out = SodkitKappa::from(&result);
        Ok(())
    })
}

/// Landis–Koch level of `kappa` as a `SODKIT_LEVEL_*` constant.
///
/// # Safety
/// `out_level` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_interpret_kappa(kappa: f64, out_level: *mut i32) -> i32 {
    guard(|| {
        let out = out_arg(out_level, "out_level")?;
        *out = level_code(interpret_kappa(kappa)?);
        Ok(())
    })
}

/// Human-readable name of a level constant, or null for unknown codes.
#[no_mangle]
pub extern "C" fn sodkit_level_name(level: i32) -> *const c_char {
    let name: &'static str = match level {
        SODKIT_LEVEL_NONE => "no agreement\0",
        SODKIT_LEVEL_SLIGHT => "slight\0",
        SODKIT_LEVEL_FAIR => "fair\0",
        SODKIT_LEVEL_MODERATE => "moderate\0",
        SODKIT_LEVEL_SUBSTANTIAL => "substantial\0",
        SODKIT_LEVEL_ALMOST_PERFECT => "almost perfect\0",
        _ => return ptr::null(),
    };
    name.as_ptr().cast()
}

/// Macro-averaged F1 from per-class precision and recall arrays of length `n`.
///
/// # Safety
/// `precision` and `recall` must point to `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_macro_f1(precision: *const f64, recall: *const f64, n: usize, out: *mut f64) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = slice_arg(precision, n, "precision")?;
        let r = slice_arg(recall, n, "recall")?;
        let f1s: Vec<f64> = p.iter().zip(r).map(|(p, r)| sodkit::evaluator::f1_score(*p, *r)).collect();
        *out = sodkit::evaluator::macro_f1(&f1s)?;
        Ok(())
    })
}

/// Numerically stable softmax of `n` logits into `out` (also length `n`).
///
/// # Safety
/// `logits` and `out` must each point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn sodkit_softmax(logits: *const f64, n: usize, out: *mut f64) -> i32 {
    guard(|| {
        let z = slice_arg(logits, n, "logits")?;
        if out.is_null() {
            return Err(Failure::Argument("out is null".into()));
        }
        let p = sodkit::trainer::softmax(z)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&p);
        Ok(())
    })
}

/// A loaded classifier.
pub struct SodkitModel {
    model: TrainedModel,
    labels: Vec<CString>,
}

/// Loads a model directory written by `sodkit train`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_load(dir: *const c_char, out: *mut *mut SodkitModel) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = str_arg(dir, "dir")?;
        let model = TrainedModel::load(Path::new(dir))?;
        let labels = model
            .class_order
            .iter()
            .map(|l| CString::new(l.as_str()).expect("labels contain no NUL"))
            .collect();
        *out = Box::into_raw(Box::new(SodkitModel { model, labels }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `sodkit_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_free(model: *mut SodkitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_num_classes(model: *const SodkitModel) -> usize {
    model.as_ref().map_or(0, |m| m.labels.len())
}

/// Label of class `index`, owned by the handle; null if out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_class_label(model: *const SodkitModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.labels.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

fn write_prediction(p: &Prediction, probs: *mut f64, probs_len: usize, out_index: *mut usize) -> Result<(), Failure> {
    if probs_len < p.probabilities.len() {
        return Err(Failure::Buffer(format!(
            "probability buffer holds {probs_len} values, {} needed",
            p.probabilities.len()
        )));
    }
    if probs.is_null() {
        return Err(Failure::Argument("probabilities is null".into()));
    }
    unsafe {
        std::slice::from_raw_parts_mut(probs, p.probabilities.len()).copy_from_slice(&p.probabilities);
        *out_arg(out_index, "out_index")? = p.predicted_index;
    }
    Ok(())
}

/// Classifies an encoded PNG or JPEG image held in memory.
///
/// # Safety
/// `data` must point to `len` bytes, `probabilities` to `probabilities_len`
/// writable values, and `out_index` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_predict_bytes(
    model: *const SodkitModel,
    data: *const u8,
    len: usize,
    probabilities: *mut f64,
    probabilities_len: usize,
    out_index: *mut usize,
) -> i32 {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::Argument("model is null".into()))?;
        let bytes = slice_arg(data, len, "data")?;
        let p = m.model.predict_bytes(bytes)?;
        write_prediction(&p, probabilities, probabilities_len, out_index)
    })
}

/// Classifies an image file.
///
/// # Safety
/// As for `sodkit_model_predict_bytes`, with `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sodkit_model_predict_file(
    model: *const SodkitModel,
    path: *const c_char,
    probabilities: *mut f64,
    probabilities_len: usize,
    out_index: *mut usize,
) -> i32 {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::Argument("model is null".into()))?;
        let p = m.model.predict_path(Path::new(str_arg(path, "path")?))?;
        write_prediction(&p, probabilities, probabilities_len, out_index)
    })
}

/// An interrater study session opened from a data directory.
pub struct SodkitSession {
    stored: StoredSession,
}

/// Opens `data_dir/sessions/<session_id>` and replays its label log.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_session_open(
    data_dir: *const c_char,
    session_id: *const c_char,
    out: *mut *mut SodkitSession,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let stored = StoredSession::open(Path::new(str_arg(data_dir, "data_dir")?), str_arg(session_id, "session_id")?)?;
        *out = Box::into_raw(Box::new(SodkitSession { stored }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from `sodkit_session_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sodkit_session_free(session: *mut SodkitSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of labels recorded so far, or 0 for a null handle.
///
/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sodkit_session_label_count(session: *const SodkitSession) -> usize {
    session.as_ref().map_or(0, |s| s.stored.session().label_count())
}

/// Records and persists one label under the batch protocol.
///
/// # Safety
/// `session` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sodkit_session_record_label(
    session: *mut SodkitSession,
    rater: *const c_char,
    image_id: *const c_char,
    method: *const c_char,
    label: *const c_char,
) -> i32 {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| Failure::Argument("session is null".into()))?;
        let method: ScoringMethod = str_arg(method, "method")?.parse()?;
        s.stored.record_label(
            str_arg(rater, "rater")?,
            str_arg(image_id, "image_id")?,
            method,
            str_arg(label, "label")?,
            chrono::Utc::now(),
        )?;
        Ok(())
    })
}

/// Fleiss' kappa over `n_raters` raters of a session for one method.
///
/// # Safety
/// `raters` must point to `n_raters` NUL-terminated strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sodkit_session_agreement(
    session: *const SodkitSession,
    raters: *const *const c_char,
    n_raters: usize,
    method: *const c_char,
    out: *mut SodkitKappa,
) -> i32 {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| Failure::Argument("session is null".into()))?;
        let out = out_arg(out, "out")?;
        let ids = slice_arg(raters, n_raters, "raters")?
            .iter()
            .map(|p| str_arg(*p, "rater").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let method: ScoringMethod = str_arg(method, "method")?.parse()?;
        let result = fleiss_kappa(&build_rating_matrix(s.stored.session(), &ids, method)?)?;
        *out = SodkitKappa::from(&result);
        Ok(())
    })
}
