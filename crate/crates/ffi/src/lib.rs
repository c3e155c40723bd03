//! C ABI over `gapgrid`.
//!
//! Every function returns a [`GgStatus`]. On failure the message is available
//! from [`gg_last_error_message`] until the next call on the same thread.
//! Strings handed out by the library must be released with [`gg_string_free`],
//! models with [`gg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gapgrid::checkpoint::Checkpoint;
use gapgrid::data::{derive_label_set, parse_jsonl, to_jsonl, EntityMention};
use gapgrid::decoder::decode_entities;
use gapgrid::eval::span_f1;
use gapgrid::tagging::{encode_grid, GridLabelMatrix};
use gapgrid::trainer::predict_corpus;
use gapgrid::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed input, invalid annotations or an undecodable grid.
    Data = 3,
    /// Shape mismatch or non-finite values.
    Numeric = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// A loaded checkpoint.
pub struct GgModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(GgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => GgStatus::Io,
            e if e.is_numeric() => GgStatus::Numeric,
            _ => GgStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            GgStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn check_out<T>(out: *mut T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(GgStatus::NullPointer, format!("{what} is null")));
    }
    Ok(())
}

fn into_c(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(GgStatus::Data, "output contains a NUL byte".into()))
}

fn mentions_json<'a>(mentions: impl IntoIterator<Item = &'a EntityMention>) -> String {
    let list: Vec<serde_json::Value> = mentions
        .into_iter()
        .map(|m| {
            let spans: Vec<[usize; 2]> = m.fragments().iter().map(|s| [s.start, s.end]).collect();
            serde_json::json!({"type": m.entity_type(), "spans": spans})
        })
        .collect();
    serde_json::Value::Array(list).to_string()
}

/// Message for the last failed call on this thread, or null. The pointer is
/// owned by the library and valid until the next call.
#[no_mangle]
pub extern "C" fn gg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_model_load(path: *const c_char, out: *mut *mut GgModel) -> GgStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = read_str(path, "path")?;
        let checkpoint = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(GgModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`gg_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gg_model_free(model: *mut GgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the model on a JSONL corpus (entities are ignored) and writes the
/// predicted corpus as JSONL to `*out`. Sentences whose grids exceed the
/// decoder's path cap come back without entities.
///
/// # Safety
/// `model` must be live; `corpus_jsonl` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gg_model_predict(
    model: *const GgModel,
    corpus_jsonl: *const c_char,
    out: *mut *mut c_char,
) -> GgStatus {
    guard(|| {
        check_out(out, "out")?;
        let model = model
            .as_ref()
            .ok_or_else(|| Failure(GgStatus::NullPointer, "model is null".into()))?;
        let corpus = parse_jsonl(read_str(corpus_jsonl, "corpus")?)?;
        let ck = &model.checkpoint;
        let (pred, _) = predict_corpus(&ck.model, &ck.labels, &ck.vocab, &corpus, None)?;
        *out = into_c(to_jsonl(&pred))?;
        Ok(())
    })
}

/// Encodes one annotated example (a single JSONL record) into its grid TSV.
/// Entity types are taken from the example itself.
///
/// # Safety
/// `example_json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gg_encode_example(
    example_json: *const c_char,
    out: *mut *mut c_char,
) -> GgStatus {
    guard(|| {
        check_out(out, "out")?;
        let corpus = parse_jsonl(read_str(example_json, "example")?)?;
        let [example] = corpus.as_slice() else {
            return Err(Failure(
                GgStatus::Data,
                format!("expected one example, got {}", corpus.len()),
            ));
        };
        let labels = derive_label_set(&corpus);
        let (grid, _) = encode_grid(example, &labels)?;
        *out = into_c(grid.to_tsv(&labels))?;
        Ok(())
    })
}

/// Decodes a grid TSV over `n` tokens into a JSON array of
/// `{"type": ..., "spans": [[start, end], ...]}`.
///
/// # Safety
/// `tsv` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gg_decode_grid_tsv(
    tsv: *const c_char,
    n: usize,
    out: *mut *mut c_char,
) -> GgStatus {
    guard(|| {
        check_out(out, "out")?;
        let (grid, labels) = GridLabelMatrix::from_tsv(read_str(tsv, "tsv")?, n, None)?;
        let mentions = decode_entities(&grid, &labels)?;
        *out = into_c(mentions_json(&mentions))?;
        Ok(())
    })
}

/// Span-level exact-match precision, recall and F1 of two JSONL corpora
/// aligned by sentence id.
///
/// # Safety
/// Both strings must be NUL-terminated; the three outputs writable.
#[no_mangle]
pub unsafe extern "C" fn gg_span_f1(
    pred_jsonl: *const c_char,
    gold_jsonl: *const c_char,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> GgStatus {
    guard(|| {
        check_out(precision, "precision")?;
        check_out(recall, "recall")?;
        check_out(f1, "f1")?;
        let pred = parse_jsonl(read_str(pred_jsonl, "pred")?)?;
        let gold = parse_jsonl(read_str(gold_jsonl, "gold")?)?;
        let r = span_f1(&pred, &gold)?;
        *precision = r.precision;
        *recall = r.recall;
        *f1 = r.f1;
        Ok(())
    })
}
