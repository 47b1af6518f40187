//! C interface to `wsd-core`.
//!
//! Every function returns a [`WsdStatus`]; on failure a description is kept
//! per thread and can be read with [`wsd_last_error_message`]. Bags and
//! models are opaque handles released with their `_free` function.
//! Consensus levels are passed as `uint32_t` (0 homogeneous, 1 heterogeneous,
//! 2 no consensus) and classes as 0 benign through 3 Gleason 5.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use wsd_core::bags::{read_bag, Bag, BagError};
use wsd_core::gleason::{
    class_of, consensus_level, parse_score, wsd_weight, ConsensusLevel, GleasonError, GleasonScore,
    WeightTriple, WsdScale,
};
use wsd_core::metrics::{balanced_accuracy, confusion, weighted_f1, ConfusionMatrix, MetricsError};
use wsd_core::models::{MilModel, ModelError, N_CLASSES};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Format = 5,
    DimensionMismatch = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A Gleason score; `primary == secondary == 0` encodes benign.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WsdScore {
    pub primary: u8,
    pub secondary: u8,
}

/// Opaque slide bag.
pub struct WsdBag(Bag);

/// Opaque trained model.
pub struct WsdModel(MilModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(WsdStatus, String);

impl Failure {
    fn new(status: WsdStatus, message: impl Into<String>) -> Self {
        Failure(status, message.into())
    }
}

impl From<GleasonError> for Failure {
    fn from(e: GleasonError) -> Self {
        let status = match e {
            GleasonError::Malformed(_) | GleasonError::GradeOutOfRange(_) => WsdStatus::Parse,
            _ => WsdStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<BagError> for Failure {
    fn from(e: BagError) -> Self {
        let status = match e {
            BagError::Io { .. } => WsdStatus::Io,
            _ => WsdStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Io { .. } => WsdStatus::Io,
            ModelError::DimensionMismatch { .. } => WsdStatus::DimensionMismatch,
            ModelError::Checkpoint { .. }
            | ModelError::ParamCount { .. }
            | ModelError::ParamShape { .. } => WsdStatus::Format,
            _ => WsdStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure(WsdStatus::InvalidArgument, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WsdStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {message}"));
            WsdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(
            WsdStatus::NullPointer,
            format!("{name} is NULL"),
        ))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be NULL or a valid NUL-terminated string.
unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure::new(
            WsdStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

fn to_core(score: WsdScore) -> Result<GleasonScore, Failure> {
    if score.primary == 0 && score.secondary == 0 {
        Ok(GleasonScore::Benign)
    } else {
        Ok(GleasonScore::graded(score.primary, score.secondary)?)
    }
}

fn from_core(score: GleasonScore) -> WsdScore {
    match score {
        GleasonScore::Benign => WsdScore {
            primary: 0,
            secondary: 0,
        },
        GleasonScore::Graded { primary, secondary } => WsdScore { primary, secondary },
    }
}

fn level_of(level: u32) -> Result<ConsensusLevel, Failure> {
    ConsensusLevel::ALL
        .get(level as usize)
        .copied()
        .ok_or_else(|| {
            Failure::new(
                WsdStatus::InvalidArgument,
                format!("consensus level {level} out of range 0..3"),
            )
        })
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wsd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses `"3+4"` or `"benign"`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_parse_score(text: *const c_char, out: *mut WsdScore) -> WsdStatus {
    guard(|| {
        let text = c_str(text, "text")?;
        non_null(out, "out")?;
        *out = from_core(parse_score(text)?);
        Ok(())
    })
}

/// Writes the consensus level (0, 1 or 2) of an expert/non-expert pair.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_consensus(
    expert: WsdScore,
    nonexpert: WsdScore,
    out: *mut u32,
) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = consensus_level(to_core(expert)?, to_core(nonexpert)?).index() as u32;
        Ok(())
    })
}

/// Writes the slide class index (0 benign .. 3 Gleason 5) of a score.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_class_of(score: WsdScore, out: *mut u32) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = class_of(to_core(score)?).index() as u32;
        Ok(())
    })
}

/// Regression target of a consensus level on the default scale.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_difficulty(level: u32, out: *mut f64) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = WsdScale::default().score(level_of(level)?);
        Ok(())
    })
}

/// Classification loss weight of a consensus level under `(w_nc, w_hec, w_hoc)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_loss_weight(
    level: u32,
    w_nc: f64,
    w_hec: f64,
    w_hoc: f64,
    allow_out_of_range: bool,
    out: *mut f64,
) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = wsd_weight(
            level_of(level)?,
            &WeightTriple::new(w_nc, w_hec, w_hoc),
            allow_out_of_range,
        )?;
        Ok(())
    })
}

/// Reads a `.wsdb` bag file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_bag_read(path: *const c_char, out: *mut *mut WsdBag) -> WsdStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(WsdBag(read_bag(path)?)));
        Ok(())
    })
}

/// # Safety
/// `bag` must be NULL or a handle from [`wsd_bag_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wsd_bag_free(bag: *mut WsdBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// Number of instances, or 0 for NULL.
///
/// # Safety
/// `bag` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wsd_bag_instances(bag: *const WsdBag) -> usize {
    bag.as_ref().map_or(0, |b| b.0.n())
}

/// Feature dimension, or 0 for NULL.
///
/// # Safety
/// `bag` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wsd_bag_dim(bag: *const WsdBag) -> usize {
    bag.as_ref().map_or(0, |b| b.0.dim())
}

/// Copies the row-major `n x d` features into `buf` of `len` doubles.
///
/// # Safety
/// `bag` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn wsd_bag_features(
    bag: *const WsdBag,
    buf: *mut f64,
    len: usize,
) -> WsdStatus {
    guard(|| {
        non_null(bag, "bag")?;
        non_null(buf, "buf")?;
        let data = (*bag).0.features.data();
        if len < data.len() {
            return Err(Failure::new(
                WsdStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_model_load(path: *const c_char, out: *mut *mut WsdModel) -> WsdStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(WsdModel(MilModel::load(path)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`wsd_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wsd_model_free(model: *mut WsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the model on a bag. Writes four class logits to `logits` and the
/// argmax class index to `predicted`; either may be NULL.
///
/// # Safety
/// Handles must be live; non-NULL outputs must be writable (`logits` for 4 doubles).
#[no_mangle]
pub unsafe extern "C" fn wsd_model_forward(
    model: *const WsdModel,
    bag: *const WsdBag,
    logits: *mut f64,
    predicted: *mut u32,
) -> WsdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(bag, "bag")?;
        let out = (*model).0.forward(&(*bag).0)?;
        if !logits.is_null() {
            ptr::copy_nonoverlapping(out.class_logits.as_ptr(), logits, N_CLASSES);
        }
        if !predicted.is_null() {
            *predicted = out.predicted_class().index() as u32;
        }
        Ok(())
    })
}

/// Copies the raw per-instance attention (length `n`) into `buf`.
///
/// # Safety
/// Handles must be live and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn wsd_model_attention(
    model: *const WsdModel,
    bag: *const WsdBag,
    buf: *mut f64,
    len: usize,
) -> WsdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(bag, "bag")?;
        non_null(buf, "buf")?;
        let out = (*model).0.forward(&(*bag).0)?;
        if len < out.attention.len() {
            return Err(Failure::new(
                WsdStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", out.attention.len()),
            ));
        }
        ptr::copy_nonoverlapping(out.attention.as_ptr(), buf, out.attention.len());
        Ok(())
    })
}

/// # Safety
/// `truth` and `predicted` must be valid for `n` reads.
unsafe fn matrix(
    truth: *const u32,
    predicted: *const u32,
    n: usize,
) -> Result<ConfusionMatrix, Failure> {
    non_null(truth, "truth")?;
    non_null(predicted, "predicted")?;
    let t: Vec<usize> = std::slice::from_raw_parts(truth, n)
        .iter()
        .map(|&v| v as usize)
        .collect();
    let p: Vec<usize> = std::slice::from_raw_parts(predicted, n)
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok(confusion(&t, &p)?)
}

/// Balanced accuracy of `n` class indices.
///
/// # Safety
/// Arrays must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_balanced_accuracy(
    truth: *const u32,
    predicted: *const u32,
    n: usize,
    out: *mut f64,
) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = balanced_accuracy(&matrix(truth, predicted, n)?)?;
        Ok(())
    })
}

/// Support-weighted F1 of `n` class indices.
///
/// # Safety
/// Arrays must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn wsd_weighted_f1(
    truth: *const u32,
    predicted: *const u32,
    n: usize,
    out: *mut f64,
) -> WsdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = weighted_f1(&matrix(truth, predicted, n)?)?;
        Ok(())
    })
}
