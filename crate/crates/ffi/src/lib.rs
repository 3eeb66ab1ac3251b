//! C ABI for embedding the crate in other languages: opaque model handles,
//! integer status codes, and a thread-local last-error message. The header
//! in `include/stmoe.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use stmoe::config::RunConfig;
use stmoe::data::{fixed_val_batches, load_corpus, split};
use stmoe::error::Error;
use stmoe::model::{load_checkpoint_into, read_checkpoint, Model};
use stmoe::routing::{routing_param_count, RouterKind};
use stmoe::train::eval_on_batches;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StmoeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Unsupported = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> StmoeStatus {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Index(_) | Error::Stats(_) => {
            StmoeStatus::InvalidArgument
        }
        Error::Io(_) | Error::Ingest(_) | Error::Checkpoint(_) => StmoeStatus::Io,
        Error::Unsupported(_) => StmoeStatus::Unsupported,
        Error::Train(_) => StmoeStatus::Internal,
    }
}

fn fail(err: Error) -> StmoeStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, StmoeStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(StmoeStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        StmoeStatus::InvalidUtf8
    })
}

/// Loaded model plus the run config recovered from its checkpoint.
pub struct StmoeModel {
    model: Model<f32>,
    config: RunConfig,
}

/// Crate version as a static C string.
#[no_mangle]
pub extern "C" fn stmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Learned routing parameter count for a router kind
/// ("cosine", "linear", "hash", "random_fixed").
///
/// # Safety
/// `kind` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stmoe_routing_param_count(
    kind: *const c_char,
    d_model: u64,
    d_space: u64,
    experts: u64,
    layers: u64,
    include_kinematic: bool,
    out: *mut u64,
) -> StmoeStatus {
    if out.is_null() {
        set_error("null output pointer");
        return StmoeStatus::NullArgument;
    }
    let kind = match cstr(kind) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let kind = match RouterKind::parse(kind) {
        Ok(k) => k,
        Err(e) => return fail(e),
    };
    *out = routing_param_count(
        kind,
        d_model as usize,
        d_space as usize,
        experts as usize,
        layers as usize,
        include_kinematic,
    );
    StmoeStatus::Ok
}

/// Expert-FLOP savings in percent for a mean executed hop count.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stmoe_flop_savings(
    avg_hops: f64,
    hops: u64,
    out: *mut f64,
) -> StmoeStatus {
    if out.is_null() {
        set_error("null output pointer");
        return StmoeStatus::NullArgument;
    }
    match stmoe::layer::flop_savings_from_avg(avg_hops, hops as usize) {
        Ok(v) => {
            *out = v;
            StmoeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Percentile bootstrap CI over per-batch loss differences.
///
/// # Safety
/// `diffs` must point to `len` doubles; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stmoe_paired_bootstrap_ci(
    diffs: *const f64,
    len: usize,
    resamples: usize,
    level: f64,
    seed: u64,
    out_mean: *mut f64,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> StmoeStatus {
    if diffs.is_null() || out_mean.is_null() || out_lo.is_null() || out_hi.is_null() {
        set_error("null argument");
        return StmoeStatus::NullArgument;
    }
    let slice = std::slice::from_raw_parts(diffs, len);
    match stmoe::stats::paired_bootstrap_ci(slice, resamples, level, seed) {
        Ok((mean, lo, hi)) => {
            *out_mean = mean;
            *out_lo = lo;
            *out_hi = hi;
            StmoeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// TOST equivalence verdict with its 90% CI bounds.
///
/// # Safety
/// `diffs` must point to `len` doubles; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stmoe_tost(
    diffs: *const f64,
    len: usize,
    margin: f64,
    resamples: usize,
    seed: u64,
    out_equivalent: *mut bool,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> StmoeStatus {
    if diffs.is_null() || out_equivalent.is_null() || out_lo.is_null() || out_hi.is_null() {
        set_error("null argument");
        return StmoeStatus::NullArgument;
    }
    let slice = std::slice::from_raw_parts(diffs, len);
    match stmoe::stats::tost(slice, margin, resamples, seed) {
        Ok((eq, lo, hi)) => {
            *out_equivalent = eq;
            *out_lo = lo;
            *out_hi = hi;
            StmoeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Load a checkpoint into an opaque handle. Free with `stmoe_model_free`.
///
/// # Safety
/// `ckpt_path` must be a valid NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stmoe_model_load(
    ckpt_path: *const c_char,
    out: *mut *mut StmoeModel,
) -> StmoeStatus {
    if out.is_null() {
        set_error("null output pointer");
        return StmoeStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let path = match cstr(ckpt_path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let load = || -> Result<StmoeModel, Error> {
        let (lines, blocks) = read_checkpoint(Path::new(path))?;
        let config = RunConfig::from_lines(&lines)?;
        let model = load_checkpoint_into(config.model.clone(), &blocks)?;
        Ok(StmoeModel { model, config })
    };
    match load() {
        Ok(handle) => {
            *out = Box::into_raw(Box::new(handle));
            StmoeStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must come from `stmoe_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn stmoe_model_free(model: *mut StmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total parameter count of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stmoe_model_param_total(
    model: *const StmoeModel,
    out: *mut u64,
) -> StmoeStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return StmoeStatus::NullArgument;
    }
    *out = (*model).model.param_count().total;
    StmoeStatus::Ok
}

/// Routing parameter count of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stmoe_model_routing_params(
    model: *const StmoeModel,
    out: *mut u64,
) -> StmoeStatus {
    if model.is_null() || out.is_null() {
        set_error("null argument");
        return StmoeStatus::NullArgument;
    }
    *out = (*model).model.param_count().routing;
    StmoeStatus::Ok
}

/// Teacher-forced evaluation on the validation tail of a byte corpus.
/// Uses the handle's stored batch/window settings when `batch_size` or
/// `max_batches` are zero.
///
/// # Safety
/// Pointers must be valid; the corpus path NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stmoe_model_eval_ppl(
    model: *const StmoeModel,
    corpus_path: *const c_char,
    val_fraction: f64,
    batch_size: usize,
    max_batches: usize,
    out_loss: *mut f64,
    out_ppl: *mut f64,
) -> StmoeStatus {
    if model.is_null() || out_loss.is_null() || out_ppl.is_null() {
        set_error("null argument");
        return StmoeStatus::NullArgument;
    }
    let path = match cstr(corpus_path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let handle = &*model;
    let run = || -> Result<(f64, f64), Error> {
        let corpus = load_corpus(path)?;
        let (_, val) = split(&corpus, val_fraction)?;
        let batch = if batch_size == 0 { handle.config.train.batch_size } else { batch_size };
        let cap = if max_batches == 0 { handle.config.train.val_batches } else { max_batches };
        let batches = fixed_val_batches(&val, batch, handle.model.config.seq_len, cap)?;
        let eval = eval_on_batches(&handle.model, &batches, &Default::default())?;
        Ok((eval.mean_loss, eval.ppl))
    };
    match run() {
        Ok((loss, ppl)) => {
            *out_loss = loss;
            *out_ppl = ppl;
            StmoeStatus::Ok
        }
        Err(e) => fail(e),
    }
}
