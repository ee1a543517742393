//! C ABI over the zstc toolkit.
//!
//! Every function returns a [`ZstcStatus`]; on failure a message is kept per
//! thread and can be read with [`zstc_last_error`]. Models are opaque
//! handles created by [`zstc_model_load`] and released by [`zstc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use zstc::corpus::{label_overlap, Aspect, DatasetSpec, Example, Partition, Split};
use zstc::encoder::{load_checkpoint, BagOfTokensEmbedder, Model};
use zstc::evaluation::{is_correct, AspectPolicy, ModelPredictor, Predictor};
use zstc::formalizations::{binary_score, dual_encode_score, Formalization, DEFAULT_TEMPLATE};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZstcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    ModeMismatch = 5,
    NotFound = 6,
    Internal = 7,
    Panic = 8,
}

/// Formalization selector for [`zstc_predict`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZstcFormalization {
    Binary = 0,
    Dual = 1,
    Generative = 2,
    SeqCls = 3,
}

/// Opaque model handle.
pub struct ZstcModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(ZstcStatus, String);

impl From<zstc::Error> for Failure {
    fn from(e: zstc::Error) -> Self {
        let status = match &e {
            zstc::Error::Io { .. } | zstc::Error::Checkpoint { .. } => ZstcStatus::Io,
            zstc::Error::ModeMismatch { .. } => ZstcStatus::ModeMismatch,
            zstc::Error::InvalidInput(_)
            | zstc::Error::EmptyCandidates
            | zstc::Error::UnknownAspect(_)
            | zstc::Error::SequenceTooLong { .. }
            | zstc::Error::NonTextualLabel(_) => ZstcStatus::InvalidArgument,
            _ => ZstcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ZstcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ZstcStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            ZstcStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` is NULL or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure(ZstcStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(ZstcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `ptr` points to `n` NUL-terminated strings (or `n` is 0).
unsafe fn read_list(ptr: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if ptr.is_null() {
        return Err(Failure(ZstcStatus::NullPointer, format!("{what} is NULL")));
    }
    std::slice::from_raw_parts(ptr, n)
        .iter()
        .map(|&p| read_str(p, what).map(str::to_string))
        .collect()
}

/// # Safety
/// `ptr` is NULL or a NUL-terminated string.
unsafe fn read_aspect(ptr: *const c_char) -> Result<Option<Aspect>, Failure> {
    if ptr.is_null() {
        return Ok(None);
    }
    Ok(Some(read_str(ptr, "aspect")?.parse::<Aspect>()?))
}

/// # Safety
/// `model` is NULL or a live handle from [`zstc_model_load`].
unsafe fn model_ref<'a>(model: *const ZstcModel) -> Result<&'a Model, Failure> {
    model
        .as_ref()
        .map(|m| &m.model)
        .ok_or_else(|| Failure(ZstcStatus::NullPointer, "model is NULL".into()))
}

fn out_ptr<T>(out: *mut T) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(ZstcStatus::NullPointer, "output pointer is NULL".into()))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn zstc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn zstc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory into a new handle written to `*out`.
///
/// # Safety
/// `checkpoint_dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn zstc_model_load(checkpoint_dir: *const c_char, out: *mut *mut ZstcModel) -> ZstcStatus {
    guard(|| {
        out_ptr(out)?;
        let dir = read_str(checkpoint_dir, "checkpoint_dir")?;
        let model = load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(ZstcModel { model }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle from [`zstc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn zstc_model_free(model: *mut ZstcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Probability that `label` fits `text` under the binary formalization.
/// `aspect` may be NULL.
///
/// # Safety
/// Pointers are valid NUL-terminated strings (or NULL where allowed);
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn zstc_binary_score(
    model: *const ZstcModel,
    text: *const c_char,
    label: *const c_char,
    aspect: *const c_char,
    out: *mut f64,
) -> ZstcStatus {
    guard(|| {
        out_ptr(out)?;
        let m = model_ref(model)?;
        let aspect = read_aspect(aspect)?;
        *out = binary_score(m, read_str(text, "text")?, read_str(label, "label")?, aspect.as_ref())?;
        Ok(())
    })
}

/// Cosine similarity of the text and label encodings. `aspect` may be NULL.
///
/// # Safety
/// As [`zstc_binary_score`].
#[no_mangle]
pub unsafe extern "C" fn zstc_dual_score(
    model: *const ZstcModel,
    text: *const c_char,
    label: *const c_char,
    aspect: *const c_char,
    out: *mut f64,
) -> ZstcStatus {
    guard(|| {
        out_ptr(out)?;
        let m = model_ref(model)?;
        let aspect = read_aspect(aspect)?;
        *out = dual_encode_score(&m.encoder, read_str(text, "text")?, read_str(label, "label")?, aspect.as_ref())?;
        Ok(())
    })
}

/// Picks one of `n_candidates` labels for `text` and writes its index.
/// `formalization` is a [`ZstcFormalization`] value; `aspect` may be NULL.
///
/// # Safety
/// `candidates` points to `n_candidates` NUL-terminated strings; `out_index`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn zstc_predict(
    model: *const ZstcModel,
    formalization: u32,
    text: *const c_char,
    candidates: *const *const c_char,
    n_candidates: usize,
    aspect: *const c_char,
    out_index: *mut usize,
) -> ZstcStatus {
    guard(|| {
        out_ptr(out_index)?;
        let m = model_ref(model)?;
        let formalization = match formalization {
            0 => Formalization::Binary,
            1 => Formalization::Dual,
            2 => Formalization::Generative,
            3 => Formalization::SeqCls,
            other => {
                return Err(Failure(ZstcStatus::InvalidArgument, format!("unknown formalization {other}")));
            }
        };
        let candidates = read_list(candidates, n_candidates, "candidates")?;
        let aspect = read_aspect(aspect)?;
        let policy = if aspect.is_some() {
            AspectPolicy::DatasetAspect
        } else {
            AspectPolicy::Omit
        };
        let example = Example {
            text: read_str(text, "text")?.to_string(),
            gold_labels: Vec::new(),
            dataset_id: String::new(),
            aspect: aspect.unwrap_or(Aspect::Topic),
            split: Split::OutOfDomain,
            partition: Partition::Test,
        };
        let embedder = BagOfTokensEmbedder::default();
        let predictor = ModelPredictor::new(m, formalization, policy, &embedder, DEFAULT_TEMPLATE, 8)?;
        let label = predictor.predict(&example, &candidates)?;
        *out_index = candidates
            .iter()
            .position(|c| *c == label)
            .ok_or_else(|| Failure(ZstcStatus::NotFound, format!("predicted label {label:?} is not a candidate")))?;
        Ok(())
    })
}

/// Share (0 to 100) of the out-of-domain label tokens seen among the
/// in-domain labels.
///
/// # Safety
/// Each list points to the given number of NUL-terminated strings; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn zstc_label_overlap(
    in_labels: *const *const c_char,
    n_in: usize,
    out_labels: *const *const c_char,
    n_out: usize,
    out: *mut f64,
) -> ZstcStatus {
    guard(|| {
        out_ptr(out)?;
        let spec = |id: &str, split, labels| DatasetSpec {
            dataset_id: id.to_string(),
            aspect: Aspect::Topic,
            split,
            label_vocabulary: labels,
            counts: None,
        };
        let a = spec("in", Split::InDomain, read_list(in_labels, n_in, "in_labels")?);
        let b = spec("out", Split::OutOfDomain, read_list(out_labels, n_out, "out_labels")?);
        *out = label_overlap(&a, &b)?;
        Ok(())
    })
}

/// Whether `prediction` matches any of the `n_gold` gold labels.
///
/// # Safety
/// `gold` points to `n_gold` NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn zstc_is_correct(
    prediction: *const c_char,
    gold: *const *const c_char,
    n_gold: usize,
    out: *mut bool,
) -> ZstcStatus {
    guard(|| {
        out_ptr(out)?;
        let gold = read_list(gold, n_gold, "gold")?;
        if gold.is_empty() {
            return Err(Failure(ZstcStatus::InvalidArgument, "gold label set is empty".into()));
        }
        *out = is_correct(read_str(prediction, "prediction")?, &gold);
        Ok(())
    })
}
