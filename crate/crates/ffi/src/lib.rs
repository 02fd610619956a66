//! C ABI for loading trained checkpoints and scoring patient files.
//!
//! Every entry point returns a [`DcStatus`]. On failure the message is kept
//! in thread-local storage and [`dc_last_error`] returns it. Handles are
//! opaque heap objects owned by the caller and released with the matching
//! `*_free` function; freeing null is a no-op. Panics never cross the
//! boundary and surface as `DC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use deepcare::baselines::rank_codes;
use deepcare::data::{load_jsonl_with_vocab, PatientRecord};
use deepcare::gradients::gradcheck_cases;
use deepcare::network::{next_diagnosis_distributions, predict_risk};
use deepcare::training::{load_checkpoint, Checkpoint};
use deepcare::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidRecord = 5,
    InvalidArgument = 6,
    Shape = 7,
    Checkpoint = 8,
    /// Output buffer too small or index out of range.
    OutOfRange = 9,
    GradcheckFailed = 10,
    Panic = 255,
}

/// A loaded checkpoint: model parameters plus the code vocabulary.
pub struct DcModel {
    checkpoint: Checkpoint,
}

/// Patient records coded against one model's vocabulary.
pub struct DcRecords {
    records: Vec<PatientRecord>,
    n_diagnoses: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    // Interior NULs would truncate the C string; replace them.
    let c = CString::new(message.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Io { .. } => DcStatus::Io,
        Error::Parse { .. } => DcStatus::Parse,
        Error::InvalidRecord { .. } => DcStatus::InvalidRecord,
        Error::Shape(_) => DcStatus::Shape,
        Error::Checkpoint { .. } => DcStatus::Checkpoint,
        _ => DcStatus::InvalidArgument,
    }
}

struct Fail(DcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DcStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {what}"));
            DcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|e| Fail(DcStatus::InvalidUtf8, format!("{what}: {e}")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `p` is null or points to a live `T` created by this library.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = load_checkpoint(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(DcModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`dc_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Size of the diagnosis vocabulary, 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_model_n_diagnoses(model: *const DcModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.vocabulary.n_diagnoses())
}

/// Copies diagnosis code `index` as a NUL-terminated string into `buf`.
/// `*needed` (if non-null) receives the buffer size required, including
/// the terminator, even when `buf_len` is too small.
///
/// # Safety
/// `model` is a live handle; `buf` has `buf_len` writable bytes or is null
/// with `buf_len == 0`.
#[no_mangle]
pub unsafe extern "C" fn dc_model_diagnosis_code(
    model: *const DcModel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let codes = &m.checkpoint.vocabulary.diagnosis_codes;
        let code = codes
            .get(index)
            .ok_or_else(|| Fail(DcStatus::OutOfRange, format!("code index {index} >= {}", codes.len())))?;
        let bytes = code.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len() + 1;
        }
        if buf.is_null() || buf_len < bytes.len() + 1 {
            return Err(Fail(DcStatus::OutOfRange, format!("buffer needs {} bytes", bytes.len() + 1)));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}

/// Reads a JSONL patient file against the model's vocabulary.
///
/// # Safety
/// `model` is a live handle, `path` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dc_records_load(
    model: *const DcModel,
    path: *const c_char,
    out: *mut *mut DcRecords,
) -> DcStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let vocab = &m.checkpoint.vocabulary;
        let records = load_jsonl_with_vocab(path_arg(path, "path")?, vocab)?;
        *out = Box::into_raw(Box::new(DcRecords { records, n_diagnoses: vocab.n_diagnoses() }));
        Ok(())
    })
}

/// # Safety
/// `records` is null or came from [`dc_records_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn dc_records_free(records: *mut DcRecords) {
    if !records.is_null() {
        drop(Box::from_raw(records));
    }
}

/// Number of patients, 0 for a null handle.
///
/// # Safety
/// `records` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_records_len(records: *const DcRecords) -> usize {
    records.as_ref().map_or(0, |r| r.records.len())
}

fn check_vocab(m: &DcModel, r: &DcRecords) -> Result<(), Fail> {
    if m.checkpoint.vocabulary.n_diagnoses() != r.n_diagnoses {
        return Err(Fail(DcStatus::InvalidArgument, "records were loaded for a different model".into()));
    }
    Ok(())
}

/// Writes one risk probability per patient into `out[0..len]`; `len` must
/// equal [`dc_records_len`].
///
/// # Safety
/// Handles are live; `out` has `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dc_predict_risk(
    model: *const DcModel,
    records: *const DcRecords,
    out: *mut f64,
    len: usize,
) -> DcStatus {
    guard(|| {
        let (m, r) = (handle(model, "model")?, handle(records, "records")?);
        check_vocab(m, r)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len != r.records.len() {
            return Err(Fail(DcStatus::OutOfRange, format!("len is {len}, records hold {}", r.records.len())));
        }
        let out = std::slice::from_raw_parts_mut(out, len);
        for (slot, rec) in out.iter_mut().zip(&r.records) {
            *slot = predict_risk(&m.checkpoint.model, rec)?;
        }
        Ok(())
    })
}

/// Top `k` diagnosis indices for the admission after patient `index`'s
/// last one, most probable first, ties by ascending index.
///
/// # Safety
/// Handles are live; `out` has `k` writable entries.
#[no_mangle]
pub unsafe extern "C" fn dc_next_diagnoses(
    model: *const DcModel,
    records: *const DcRecords,
    index: usize,
    out: *mut usize,
    k: usize,
) -> DcStatus {
    guard(|| {
        let (m, r) = (handle(model, "model")?, handle(records, "records")?);
        check_vocab(m, r)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = r
            .records
            .get(index)
            .ok_or_else(|| Fail(DcStatus::OutOfRange, format!("patient index {index} >= {}", r.records.len())))?;
        if k > r.n_diagnoses {
            return Err(Fail(DcStatus::OutOfRange, format!("k = {k} exceeds {} codes", r.n_diagnoses)));
        }
        let last = next_diagnosis_distributions(&m.checkpoint.model, rec)?.pop().expect("records are non-empty");
        let ranked = rank_codes(last.as_slice());
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&ranked[..k]);
        Ok(())
    })
}

/// Runs the built-in gradient check. `*max_rel_error` (if non-null)
/// receives the worst error over all cases; the status is
/// `DC_STATUS_GRADCHECK_FAILED` when it reaches `tolerance`.
///
/// # Safety
/// `max_rel_error` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn dc_gradcheck(seed: u64, h: f64, tolerance: f64, max_rel_error: *mut f64) -> DcStatus {
    guard(|| {
        let mut worst: f64 = 0.0;
        for case in gradcheck_cases() {
            worst = worst.max(case.run(seed, h)?.max_rel_error());
        }
        if !max_rel_error.is_null() {
            *max_rel_error = worst;
        }
        if worst < tolerance {
            Ok(())
        } else {
            Err(Fail(DcStatus::GradcheckFailed, format!("max relative error {worst:e} >= {tolerance:e}")))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut m: *mut DcModel = ptr::null_mut();
        assert_eq!(unsafe { dc_model_load(ptr::null(), &mut m) }, DcStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(dc_last_error()) }.to_str().unwrap();
        assert!(msg.contains("path"), "{msg}");
        assert_eq!(unsafe { dc_model_n_diagnoses(ptr::null()) }, 0);
        unsafe { dc_model_free(ptr::null_mut()) };
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let mut m: *mut DcModel = ptr::null_mut();
        let path = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(unsafe { dc_model_load(path.as_ptr(), &mut m) }, DcStatus::Io);
        assert!(m.is_null());
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(dc_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn panic_payloads_become_messages() {
        assert_eq!(guard(|| panic!("boom")), DcStatus::Panic);
        let msg = unsafe { CStr::from_ptr(dc_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
        assert_eq!(guard(|| Ok(())), DcStatus::Ok);
        assert!(dc_last_error().is_null());
    }
}
