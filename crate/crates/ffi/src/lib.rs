//! C ABI over the hadkit prompt builders, response parsers and metrics.
//!
//! Conventions:
//! - Fallible functions return a [`HadkitStatus`]. On failure, [`hadkit_last_error`]
//!   describes the latest error on the calling thread.
//! - Strings handed out as `char **` outputs are owned by the caller and are
//!   released with [`hadkit_string_free`].
//! - Strings returned by handle getters are borrowed and stay valid until the
//!   handle is freed.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::ptr;

use libc::c_char;

use hadkit::corpus::HalluRecord;
use hadkit::detection::{self, DetectionResult, Prediction, PromptMode};
use hadkit::metrics;
use hadkit::taxonomy::{Label, Taxonomy};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed input text (TOML, JSON).
    Parse = 3,
    /// Input parsed but violates a record or taxonomy rule.
    Schema = 4,
    /// Predictions do not line up with gold records.
    Alignment = 5,
    /// A type name is not in the taxonomy.
    UnknownType = 6,
    Internal = 7,
}

/// Prompt family for detection.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadkitMode {
    FineGrained = 0,
    Binary = 1,
    /// Few-shot baseline with the built-in examples.
    Baseline = 2,
}

/// Shape of a parsed label.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadkitLabelKind {
    /// One of the taxonomy types; the label text is its display name.
    Type = 0,
    NoHallucination = 1,
    /// Binary-mode positive without a type.
    Hallucinated = 2,
    /// Unparseable or unknown label.
    Invalid = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HadkitPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Opaque taxonomy handle.
pub struct HadkitTaxonomy(Taxonomy);

/// Opaque parsed detection response.
pub struct HadkitDetection {
    kind: HadkitLabelKind,
    label: CString,
    span: CString,
    correction: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(status: HadkitStatus, message: impl Into<String>) -> HadkitStatus {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
    status
}

fn to_cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("interior nul removed")
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HadkitStatus> {
    if p.is_null() {
        return Err(set_error(HadkitStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| set_error(HadkitStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn mode_of(mode: HadkitMode) -> PromptMode {
    match mode {
        HadkitMode::FineGrained => PromptMode::FineGrained,
        HadkitMode::Binary => PromptMode::Binary,
        HadkitMode::Baseline => PromptMode::BaselineFewShot(Box::default()),
    }
}

fn label_kind(label: &Label) -> HadkitLabelKind {
    match label {
        Label::Type(_) => HadkitLabelKind::Type,
        Label::NoHallucination => HadkitLabelKind::NoHallucination,
        Label::BinaryHallucinated => HadkitLabelKind::Hallucinated,
        Label::Invalid(_) => HadkitLabelKind::Invalid,
    }
}

/// Runs `f`, mapping a panic to `Internal`.
fn guard(f: impl FnOnce() -> HadkitStatus) -> HadkitStatus {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| set_error(HadkitStatus::Internal, "internal panic"))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Latest error message on this thread, or null. Borrowed; valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hadkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string produced by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hadkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Built-in taxonomy. Never null; free with [`hadkit_taxonomy_free`].
#[no_mangle]
pub extern "C" fn hadkit_taxonomy_builtin() -> *mut HadkitTaxonomy {
    Box::into_raw(Box::new(HadkitTaxonomy(Taxonomy::builtin())))
}

/// # Safety
/// `toml` must be a valid nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hadkit_taxonomy_from_toml(toml: *const c_char, out: *mut *mut HadkitTaxonomy) -> HadkitStatus {
    guard(|| {
        if out.is_null() {
            return set_error(HadkitStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = try_status!(read_str(toml, "toml"));
        match Taxonomy::from_toml(text) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(HadkitTaxonomy(t)));
                HadkitStatus::Ok
            }
            Err(e) => set_error(HadkitStatus::Schema, e.to_string()),
        }
    })
}

/// # Safety
/// `t` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hadkit_taxonomy_free(t: *mut HadkitTaxonomy) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Resolves a label string (type name, alias or "No Hallucination").
/// On success, `out_kind` gets the label shape and `out_name` the canonical
/// name, to be freed by the caller. An unknown name yields `UnknownType`.
///
/// # Safety
/// Pointers must be valid; `t` a live taxonomy handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_parse_label(
    t: *const HadkitTaxonomy,
    raw: *const c_char,
    out_kind: *mut HadkitLabelKind,
    out_name: *mut *mut c_char,
) -> HadkitStatus {
    guard(|| {
        if t.is_null() || out_kind.is_null() || out_name.is_null() {
            return set_error(HadkitStatus::NullPointer, "null argument");
        }
        *out_name = ptr::null_mut();
        let raw = try_status!(read_str(raw, "raw"));
        let label = (*t).0.parse_label(raw);
        if let Label::Invalid(text) = &label {
            return set_error(HadkitStatus::UnknownType, format!("unknown label {text:?}"));
        }
        *out_kind = label_kind(&label);
        *out_name = to_cstring(label.display()).into_raw();
        HadkitStatus::Ok
    })
}

/// Renders the detection prompt for one (input, output) pair.
///
/// # Safety
/// Pointers must be valid; `t` a live taxonomy handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_build_detection_prompt(
    t: *const HadkitTaxonomy,
    mode: HadkitMode,
    task_input: *const c_char,
    task_output: *const c_char,
    out: *mut *mut c_char,
) -> HadkitStatus {
    guard(|| {
        if t.is_null() || out.is_null() {
            return set_error(HadkitStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let input = try_status!(read_str(task_input, "task_input"));
        let output = try_status!(read_str(task_output, "task_output"));
        match detection::build_detection_prompt(&(*t).0, input, output, &mode_of(mode)) {
            Ok(p) => {
                *out = to_cstring(&p).into_raw();
                HadkitStatus::Ok
            }
            Err(e) => set_error(HadkitStatus::Schema, e.to_string()),
        }
    })
}

/// Parses a detector response. Unparseable text still succeeds, with kind
/// `Invalid`. Free the result with [`hadkit_detection_free`].
///
/// # Safety
/// Pointers must be valid; `t` a live taxonomy handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_parse(
    t: *const HadkitTaxonomy,
    mode: HadkitMode,
    raw: *const c_char,
    out: *mut *mut HadkitDetection,
) -> HadkitStatus {
    guard(|| {
        if t.is_null() || out.is_null() {
            return set_error(HadkitStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let raw = try_status!(read_str(raw, "raw"));
        let DetectionResult {
            predicted,
            span,
            correction,
            ..
        } = detection::parse_detection_response(&(*t).0, raw, &mode_of(mode));
        *out = Box::into_raw(Box::new(HadkitDetection {
            kind: label_kind(&predicted),
            label: to_cstring(predicted.display()),
            span: to_cstring(&span),
            correction: to_cstring(&correction),
        }));
        HadkitStatus::Ok
    })
}

/// # Safety
/// `d` must be a live detection handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_kind(d: *const HadkitDetection) -> HadkitLabelKind {
    if d.is_null() {
        return HadkitLabelKind::Invalid;
    }
    (*d).kind
}

/// Label text: type display name, "No Hallucination", "Hallucination", or
/// the offending text for invalid labels.
///
/// # Safety
/// `d` must be a live detection handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_label(d: *const HadkitDetection) -> *const c_char {
    if d.is_null() {
        return ptr::null();
    }
    (*d).label.as_ptr()
}

/// # Safety
/// `d` must be a live detection handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_span(d: *const HadkitDetection) -> *const c_char {
    if d.is_null() {
        return ptr::null();
    }
    (*d).span.as_ptr()
}

/// # Safety
/// `d` must be a live detection handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_correction(d: *const HadkitDetection) -> *const c_char {
    if d.is_null() {
        return ptr::null();
    }
    (*d).correction.as_ptr()
}

/// # Safety
/// `d` must be null or a live detection handle.
#[no_mangle]
pub unsafe extern "C" fn hadkit_detection_free(d: *mut HadkitDetection) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Word-multiset precision, recall and F1 of `pred` against `gold`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hadkit_word_prf(gold: *const c_char, pred: *const c_char, out: *mut HadkitPrf) -> HadkitStatus {
    guard(|| {
        if out.is_null() {
            return set_error(HadkitStatus::NullPointer, "out is null");
        }
        let gold = try_status!(read_str(gold, "gold"));
        let pred = try_status!(read_str(pred, "pred"));
        let p = metrics::word_prf(gold, pred);
        *out = HadkitPrf {
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
        };
        HadkitStatus::Ok
    })
}

fn parse_lines<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<Vec<T>, HadkitStatus> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| set_error(HadkitStatus::Parse, format!("{what} line {}: {e}", i + 1)))
        })
        .collect()
}

/// Scores JSONL predictions against JSONL gold records. On success `out_json`
/// receives the metrics report as JSON.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hadkit_evaluate_jsonl(
    gold_jsonl: *const c_char,
    preds_jsonl: *const c_char,
    out_json: *mut *mut c_char,
) -> HadkitStatus {
    guard(|| {
        if out_json.is_null() {
            return set_error(HadkitStatus::NullPointer, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let gold: Vec<HalluRecord> = try_status!(parse_lines(try_status!(read_str(gold_jsonl, "gold_jsonl")), "gold"));
        let preds: Vec<Prediction> = try_status!(parse_lines(try_status!(read_str(preds_jsonl, "preds_jsonl")), "preds"));
        match metrics::evaluate(&gold, &preds) {
            Ok(report) => {
                let json = serde_json::to_string(&report).expect("report serializes");
                *out_json = to_cstring(&json).into_raw();
                HadkitStatus::Ok
            }
            Err(e @ metrics::MetricsError::Alignment { .. }) | Err(e @ metrics::MetricsError::LengthMismatch { .. }) => {
                set_error(HadkitStatus::Alignment, e.to_string())
            }
            Err(e) => set_error(HadkitStatus::Schema, e.to_string()),
        }
    })
}
