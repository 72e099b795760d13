//! C ABI over the trained components. Handles are opaque heap objects
//! released with the matching `*_free`. Every fallible call returns an
//! [`MdStatus`]; the message of the last failure on the calling thread is
//! available from [`md_last_error`]. Images are passed as `height x width x
//! channels` float arrays in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mixdefense::checkpoint::Checkpoint;
use mixdefense::classifier::TargetClassifier;
use mixdefense::contranet::Cgan;
use mixdefense::data::Image;
use mixdefense::metric::SpDetector;
use mixdefense::pipeline::{FinalDecision, MixDefense};
use mixdefense::saec::{self, SaecDetector};
use mixdefense::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    InvalidClass = 6,
    NonFinite = 7,
    Checkpoint = 8,
    Calibration = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdDecision {
    Accepted = 0,
    RejectedLp = 1,
    RejectedSp = 2,
}

/// Verdict of the defended pipeline. `predicted_label`, `sp_flagged` and
/// `sp_distance` are meaningful only when `has_prediction` is non-zero
/// (inputs rejected by the first layer are never classified).
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MdVerdict {
    pub lp_flagged: u8,
    pub lp_score: f64,
    pub has_prediction: u8,
    pub predicted_label: u32,
    pub sp_flagged: u8,
    pub sp_distance: f64,
    pub decision: MdDecision,
    /// Accepted label; equals `predicted_label` when accepted.
    pub label: u32,
}

pub struct MdClassifier(TargetClassifier);

pub struct MdSaec(SaecDetector);

pub struct MdPipeline {
    clf: TargetClassifier,
    cgan: Cgan<f32>,
    saec: SaecDetector,
    sp: SpDetector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MdStatus {
    match e {
        Error::Io { .. } => MdStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } | Error::Format(_) => {
            MdStatus::Format
        }
        Error::Shape { .. } => MdStatus::Shape,
        Error::InvalidClass { .. } => MdStatus::InvalidClass,
        Error::NonFinite(_) => MdStatus::NonFinite,
        Error::Checkpoint(_) => MdStatus::Checkpoint,
        Error::Calibration(_) => MdStatus::Calibration,
        Error::Precondition(_) | Error::Config(_) => MdStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MdStatus, String)>) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MdStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MdStatus::Panic
        }
    }
}

fn err(e: Error) -> (MdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MdStatus, String) {
    (MdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MdStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn image_arg(pixels: *const f32, height: usize, width: usize, channels: usize) -> Result<Image, (MdStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(channels))
        .ok_or((MdStatus::InvalidArgument, "image size overflows".to_string()))?;
    let hwc = std::slice::from_raw_parts(pixels, n);
    Image::from_hwc(height, width, channels, hwc).map_err(err)
}

fn load(path: &std::path::Path) -> Result<Checkpoint, (MdStatus, String)> {
    Checkpoint::load(path).map_err(err)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn md_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_load(path: *const c_char, out: *mut *mut MdClassifier) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let clf = TargetClassifier::from_checkpoint(&load(&p)?).map_err(err)?;
        *out = Box::into_raw(Box::new(MdClassifier(clf)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`md_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_free(h: *mut MdClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `h` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_classes(h: *const MdClassifier) -> usize {
    h.as_ref().map_or(0, |c| c.0.classes())
}

/// Writes `classes` logits to `logits`.
///
/// # Safety
/// `pixels` must hold `height * width * channels` floats and `logits`
/// `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_logits(
    h: *const MdClassifier,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MdStatus {
    guard(|| {
        let c = h.as_ref().ok_or_else(|| null("handle"))?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let x = image_arg(pixels, height, width, channels)?;
        let z = c.0.logits(&x).map_err(err)?;
        if logits_len < z.len() {
            return Err((MdStatus::InvalidArgument, format!("logits buffer holds {logits_len}, need {}", z.len())));
        }
        std::slice::from_raw_parts_mut(logits, z.len()).copy_from_slice(&z);
        Ok(())
    })
}

/// # Safety
/// As [`md_classifier_logits`]; `label` must be valid.
#[no_mangle]
pub unsafe extern "C" fn md_classifier_predict(
    h: *const MdClassifier,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    label: *mut u32,
) -> MdStatus {
    guard(|| {
        let c = h.as_ref().ok_or_else(|| null("handle"))?;
        if label.is_null() {
            return Err(null("label"));
        }
        let x = image_arg(pixels, height, width, channels)?;
        *label = c.0.predict(&x).map_err(err)? as u32;
        Ok(())
    })
}

/// Loads a calibrated detector saved as JSON.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_saec_load(path: *const c_char, out: *mut *mut MdSaec) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let d = SaecDetector::load(&p).map_err(err)?;
        *out = Box::into_raw(Box::new(MdSaec(d)));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`md_saec_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_saec_free(h: *mut MdSaec) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `pixels` must hold `height * width * channels` floats; `score` and
/// `flagged` must be valid.
#[no_mangle]
pub unsafe extern "C" fn md_saec_detect(
    h: *const MdSaec,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    score: *mut f64,
    flagged: *mut u8,
) -> MdStatus {
    guard(|| {
        let d = h.as_ref().ok_or_else(|| null("handle"))?;
        if score.is_null() || flagged.is_null() {
            return Err(null("output"));
        }
        let x = image_arg(pixels, height, width, channels)?;
        let s = saec::score_image(&x, &d.0.params).map_err(err)?;
        *score = s;
        *flagged = d.0.flags(s) as u8;
        Ok(())
    })
}

/// Loads the four trained components of the defended classifier.
///
/// # Safety
/// All paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_pipeline_load(
    classifier_path: *const c_char,
    cgan_path: *const c_char,
    saec_path: *const c_char,
    sp_path: *const c_char,
    out: *mut *mut MdPipeline,
) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let clf = TargetClassifier::from_checkpoint(&load(&path_arg(classifier_path, "classifier_path")?)?).map_err(err)?;
        let cgan = Cgan::from_checkpoint(&load(&path_arg(cgan_path, "cgan_path")?)?).map_err(err)?;
        let saec = SaecDetector::load(&path_arg(saec_path, "saec_path")?).map_err(err)?;
        let sp = SpDetector::from_checkpoint(&load(&path_arg(sp_path, "sp_path")?)?).map_err(err)?;
        MixDefense::new(&saec, &clf, &sp, &cgan).map_err(err)?;
        *out = Box::into_raw(Box::new(MdPipeline { clf, cgan, saec, sp }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`md_pipeline_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_pipeline_free(h: *mut MdPipeline) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Classifies one image through both detection layers.
///
/// # Safety
/// `pixels` must hold `height * width * channels` floats and `verdict` be
/// valid. The handle may be shared across threads.
#[no_mangle]
pub unsafe extern "C" fn md_pipeline_classify(
    h: *const MdPipeline,
    pixels: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    verdict: *mut MdVerdict,
) -> MdStatus {
    guard(|| {
        let p = h.as_ref().ok_or_else(|| null("handle"))?;
        if verdict.is_null() {
            return Err(null("verdict"));
        }
        let x = image_arg(pixels, height, width, channels)?;
        let def = MixDefense::new(&p.saec, &p.clf, &p.sp, &p.cgan).map_err(err)?;
        let v = def.classify(0, &x).map_err(err)?;
        let (decision, label) = match v.decision {
            FinalDecision::Accepted(l) => (MdDecision::Accepted, l as u32),
            FinalDecision::RejectedLp => (MdDecision::RejectedLp, 0),
            FinalDecision::RejectedSp => (MdDecision::RejectedSp, 0),
        };
        *verdict = MdVerdict {
            lp_flagged: v.lp_flagged as u8,
            lp_score: v.lp_score,
            has_prediction: v.predicted_label.is_some() as u8,
            predicted_label: v.predicted_label.unwrap_or(0) as u32,
            sp_flagged: v.sp_flagged.unwrap_or(false) as u8,
            sp_distance: v.sp_distance.unwrap_or(f64::NAN),
            decision,
            label,
        };
        Ok(())
    })
}
