//! C interface to checkpoint loading, sampling and schedule queries.
//!
//! Every fallible function returns an `MdStatus`; on failure a description
//! is available from `md_last_error` on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use masked_diffuse::guidance::{ControlSpec, GuidanceConfig};
use masked_diffuse::pipeline::{load_classifier, SampleRequest, Session};
use masked_diffuse::schedule::NoiseSchedule;
use masked_diffuse::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidControl = 5,
    InvalidConfig = 6,
    Numeric = 7,
    OutOfRange = 8,
    Panic = 9,
    Other = 10,
}

impl From<&Error> for MdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::MalformedLine { .. } => MdStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => MdStatus::Checkpoint,
            Error::InvalidControl(_) | Error::ClassifierMismatch { .. } => MdStatus::InvalidControl,
            Error::Config(_) | Error::InvalidSchedule(_) | Error::InvalidBucketCount { .. } => {
                MdStatus::InvalidConfig
            }
            Error::NonFinite(_) | Error::Diverged { .. } => MdStatus::Numeric,
            Error::StepOutOfRange { .. } | Error::TokenOutOfRange { .. } | Error::Shape(_) => {
                MdStatus::OutOfRange
            }
            _ => MdStatus::Other,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: MdStatus, msg: impl Into<String>) -> MdStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), MdStatus>) -> MdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(MdStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> MdStatus {
    fail(MdStatus::from(&e), format!("{}: {e}", e.kind()))
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, MdStatus> {
    if p.is_null() {
        return Err(fail(MdStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MdStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// Message for the most recent failure on this thread, or null. The
/// pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn md_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn md_status_name(status: MdStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MdStatus::Ok => c"ok",
        MdStatus::NullArgument => c"null_argument",
        MdStatus::InvalidUtf8 => c"invalid_utf8",
        MdStatus::Io => c"io",
        MdStatus::Checkpoint => c"checkpoint",
        MdStatus::InvalidControl => c"invalid_control",
        MdStatus::InvalidConfig => c"invalid_config",
        MdStatus::Numeric => c"numeric",
        MdStatus::OutOfRange => c"out_of_range",
        MdStatus::Panic => c"panic",
        MdStatus::Other => c"other",
    };
    s.as_ptr()
}

/// Loaded checkpoint and optional classifier.
pub struct MdSession {
    session: Session,
    classifier: Option<masked_diffuse::guidance::LatentClassifier<f32>>,
}

/// Generated sentences.
pub struct MdSamples {
    texts: Vec<CString>,
    mbr_index: Option<usize>,
}

/// Loads a checkpoint file into a new session.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_session_load(path: *const c_char, out: *mut *mut MdSession) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MdStatus::NullArgument, "out is null"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let session = Session::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MdSession {
            session,
            classifier: None,
        }));
        Ok(())
    })
}

/// Attaches a classifier file used by content and POS controls.
///
/// # Safety
/// `session` must come from `md_session_load`; `path` must be a
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn md_session_set_classifier(session: *mut MdSession, path: *const c_char) -> MdStatus {
    guard(|| {
        let s = session
            .as_mut()
            .ok_or_else(|| fail(MdStatus::NullArgument, "session is null"))?;
        let path = str_arg(path, "path")?;
        s.classifier = Some(load_classifier(Path::new(path)).map_err(lib_err)?);
        Ok(())
    })
}

/// Releases a session; null is ignored.
///
/// # Safety
/// `session` must come from `md_session_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_session_free(session: *mut MdSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Vocabulary size of the loaded model, 0 for a null session.
///
/// # Safety
/// `session` must be null or come from `md_session_load`.
#[no_mangle]
pub unsafe extern "C" fn md_session_vocab_size(session: *const MdSession) -> usize {
    session.as_ref().map_or(0, |s| s.session.vocab.len())
}

/// Diffusion steps `T` of the loaded model, 0 for a null session.
///
/// # Safety
/// `session` must be null or come from `md_session_load`.
#[no_mangle]
pub unsafe extern "C" fn md_session_steps(session: *const MdSession) -> usize {
    session.as_ref().map_or(0, |s| s.session.schedule.steps())
}

/// Draws `samples` sentences of `length` tokens (0 = take the length from
/// the control). `control` may be null for unconditional sampling. With
/// `mbr` nonzero only the MBR choice is returned.
///
/// # Safety
/// `session` must come from `md_session_load`, `control` must be null or a
/// nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_sample(
    session: *const MdSession,
    control: *const c_char,
    length: usize,
    samples: usize,
    mbr: i32,
    seed: u64,
    out: *mut *mut MdSamples,
) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MdStatus::NullArgument, "out is null"));
        }
        *out = ptr::null_mut();
        let s = session
            .as_ref()
            .ok_or_else(|| fail(MdStatus::NullArgument, "session is null"))?;
        let control: Option<ControlSpec> = if control.is_null() {
            None
        } else {
            Some(str_arg(control, "control")?.parse().map_err(lib_err)?)
        };
        let req = SampleRequest {
            control,
            length: (length > 0).then_some(length),
            samples,
            mbr: mbr != 0,
            seed,
            guidance: GuidanceConfig::default(),
        };
        let o = s.session.sample(&req, s.classifier.as_ref()).map_err(lib_err)?;
        let texts = o
            .texts
            .into_iter()
            .map(|t| CString::new(t).map_err(|_| fail(MdStatus::Other, "sentence contains nul")))
            .collect::<Result<Vec<_>, _>>()?;
        *out = Box::into_raw(Box::new(MdSamples {
            texts,
            mbr_index: o.mbr_index,
        }));
        Ok(())
    })
}

/// Number of sentences, 0 for null.
///
/// # Safety
/// `samples` must be null or come from `md_sample`.
#[no_mangle]
pub unsafe extern "C" fn md_samples_count(samples: *const MdSamples) -> usize {
    samples.as_ref().map_or(0, |s| s.texts.len())
}

/// Sentence `i`, owned by `samples`; null when out of range.
///
/// # Safety
/// `samples` must be null or come from `md_sample`.
#[no_mangle]
pub unsafe extern "C" fn md_samples_text(samples: *const MdSamples, i: usize) -> *const c_char {
    samples
        .as_ref()
        .and_then(|s| s.texts.get(i))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Index of the MBR choice among the drawn candidates, or -1.
///
/// # Safety
/// `samples` must be null or come from `md_sample`.
#[no_mangle]
pub unsafe extern "C" fn md_samples_mbr_index(samples: *const MdSamples) -> i64 {
    samples
        .as_ref()
        .and_then(|s| s.mbr_index)
        .map_or(-1, |i| i as i64)
}

/// Releases a sample set; null is ignored.
///
/// # Safety
/// `samples` must come from `md_sample` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_samples_free(samples: *mut MdSamples) {
    if !samples.is_null() {
        drop(Box::from_raw(samples));
    }
}

/// Writes the retention `alpha_bar_t` of the schedule `(steps, s, eps)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_alpha_bar(steps: usize, s: f64, eps: f64, t: usize, out: *mut f64) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(MdStatus::NullArgument, "out is null"));
        }
        let sched = NoiseSchedule::new(steps, s, eps).map_err(lib_err)?;
        if t > steps {
            return Err(fail(MdStatus::OutOfRange, format!("t {t} outside [0, {steps}]")));
        }
        *out = sched.alpha_bar(t);
        Ok(())
    })
}

/// Library version string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
