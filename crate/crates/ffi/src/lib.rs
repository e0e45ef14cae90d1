//! C interface to the hyxnet detector.
//!
//! Every function returns a [`HyxnetStatus`] (or a plain value where noted).
//! On failure a description is kept per thread and can be read with
//! [`hyxnet_last_error_message`]. Panics never cross the boundary; they are
//! reported as `HYXNET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hyxnet::stream::{Action, Detector};
use hyxnet::{Checkpoint, DnsEvent, Error, ErrorKind, Tokenizer};

/// Status codes. Values 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyxnetStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// An argument was out of range or a string was not valid UTF-8.
    InvalidArgument = 2,
    /// Malformed input record or unreadable file.
    Data = 3,
    /// Checkpoint or dimension mismatch.
    Model = 4,
    /// The output buffer is too small; the required size was written.
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyxnetAction {
    None = 0,
    Alert = 1,
    BlockRecommend = 2,
}

/// Outcome of classifying one record.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyxnetResult {
    pub class_index: u32,
    pub confidence: f32,
    pub action: HyxnetAction,
}

/// Opaque detector handle.
pub struct HyxnetDetector {
    inner: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(HyxnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Usage => HyxnetStatus::InvalidArgument,
            ErrorKind::Data => HyxnetStatus::Data,
            ErrorKind::Model => HyxnetStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HyxnetStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> HyxnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            HyxnetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HyxnetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(HyxnetStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn detector<'a>(p: *const HyxnetDetector) -> Result<&'a Detector, Failure> {
    p.as_ref().map(|d| &d.inner).ok_or_else(|| null("detector"))
}

fn result_of(det: &Detector, event: &DnsEvent) -> Result<HyxnetResult, Failure> {
    let prediction = det.classify(event)?;
    let action = match det.decide(event, &prediction, 0.0).map(|a| a.action) {
        None => HyxnetAction::None,
        Some(Action::Alert) => HyxnetAction::Alert,
        Some(Action::BlockRecommend) => HyxnetAction::BlockRecommend,
    };
    Ok(HyxnetResult {
        class_index: prediction.label as u32,
        confidence: prediction.confidence,
        action,
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hyxnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn hyxnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new detector written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_load(path: *const c_char, out: *mut *mut HyxnetDetector) -> HyxnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = Checkpoint::load(&path).map_err(|e| Failure(HyxnetStatus::Model, e.to_string()))?;
        let handle = Box::new(HyxnetDetector {
            inner: Detector::new(checkpoint),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a detector. Null is ignored.
///
/// # Safety
/// `det` must come from [`hyxnet_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_free(det: *mut HyxnetDetector) {
    if !det.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(det))));
    }
}

/// Sets the alert confidence threshold, in (0, 1).
///
/// # Safety
/// `det` must be a live handle not used concurrently from another thread.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_set_threshold(det: *mut HyxnetDetector, threshold: f32) -> HyxnetStatus {
    guard(|| {
        let det = det.as_mut().ok_or_else(|| null("detector"))?;
        det.inner.set_threshold(threshold)?;
        Ok(())
    })
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_num_classes(det: *const HyxnetDetector) -> usize {
    det.as_ref().map_or(0, |d| d.inner.class_names().len())
}

/// Number of numeric features a record carries, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_num_features(det: *const HyxnetDetector) -> usize {
    det.as_ref().map_or(0, |d| d.inner.schema().numeric_count())
}

/// Copies the NUL-terminated name of class `index` into `buf`. `*len` receives
/// the name length without the terminator, also when the buffer is too small.
///
/// # Safety
/// `buf` must hold `cap` bytes (it may be null when `cap` is 0).
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_class_name(
    det: *const HyxnetDetector,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> HyxnetStatus {
    guard(|| {
        let det = detector(det)?;
        let name = det.class_names().get(index).ok_or_else(|| {
            Failure(
                HyxnetStatus::InvalidArgument,
                format!("class index {index} out of range for {} classes", det.class_names().len()),
            )
        })?;
        if !len.is_null() {
            *len = name.len();
        }
        if cap < name.len() + 1 {
            return Err(Failure(
                HyxnetStatus::BufferTooSmall,
                format!("class name needs {} bytes", name.len() + 1),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

/// Classifies one record given its query name and raw numeric features (in
/// schema order, `n` of them).
///
/// # Safety
/// `qname` must be NUL-terminated, `numerics` must hold `n` values (it may be
/// null when `n` is 0) and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_detect(
    det: *const HyxnetDetector,
    qname: *const c_char,
    numerics: *const f64,
    n: usize,
    out: *mut HyxnetResult,
) -> HyxnetStatus {
    guard(|| {
        let det = detector(det)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let qname = str_arg(qname, "qname")?;
        let values = match n {
            0 => Vec::new(),
            _ if numerics.is_null() => return Err(null("numerics")),
            _ => std::slice::from_raw_parts(numerics, n).to_vec(),
        };
        let event = DnsEvent::new(qname, values, None)?;
        *out = result_of(det, &event)?;
        Ok(())
    })
}

/// Parses and classifies one delimited record laid out per the checkpoint
/// schema (the label column, if the schema has one, may be empty).
///
/// # Safety
/// `line` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_detector_detect_line(
    det: *const HyxnetDetector,
    line: *const c_char,
    delimiter: c_char,
    out: *mut HyxnetResult,
) -> HyxnetStatus {
    guard(|| {
        let det = detector(det)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let line = str_arg(line, "line")?;
        let delim = delimiter as u8;
        if !delim.is_ascii() || delim == 0 {
            return Err(Failure(HyxnetStatus::InvalidArgument, "delimiter must be ASCII".into()));
        }
        let event = det.parse_line(line, delim as char)?;
        *out = result_of(det, &event)?;
        Ok(())
    })
}

/// Hash bucket of one domain label with the default bucket count.
///
/// # Safety
/// `label` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_bucketize(label: *const c_char, out: *mut u32) -> HyxnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = hyxnet::bucketize(str_arg(label, "label")?)?;
        Ok(())
    })
}

/// Left-padded token ids of a query name with the default length and bucket
/// count. `*len` receives the sequence length, also when `cap` is too small.
///
/// # Safety
/// `out` must hold `cap` values and `qname` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hyxnet_tokenize(qname: *const c_char, out: *mut u32, cap: usize, len: *mut usize) -> HyxnetStatus {
    guard(|| {
        let qname = str_arg(qname, "qname")?;
        let tokenizer = Tokenizer::default();
        let t = tokenizer.seq_len();
        if !len.is_null() {
            *len = t;
        }
        if cap < t {
            return Err(Failure(HyxnetStatus::BufferTooSmall, format!("token buffer needs {t} slots")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let buf = std::slice::from_raw_parts_mut(out, t);
        tokenizer.tokenize_into(qname, buf)?;
        Ok(())
    })
}
