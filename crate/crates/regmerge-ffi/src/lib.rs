//! C ABI for the regmerge toolkit.
//!
//! Checkpoints, Gram-matrix maps, and incremental merge states are exposed as
//! opaque handles created and destroyed by this library. Every fallible call
//! returns an [`RmStatus`]; on failure a message is stored in a thread-local
//! buffer readable through [`rm_last_error_message`] until the next failing
//! call on the same thread. Pointers passed in are never retained, pointers
//! handed out through `out` parameters are owned by the caller and must be
//! released with the matching `rm_*_free`.
//!
//! The generated header lives at `include/regmerge.h`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use regmerge::harness::evaluate_checkpoint;
use regmerge::io::{
    load_checkpoint, load_dataset, load_grams, load_state, save_checkpoint, save_grams, save_state,
};
use regmerge::linalg::GramMatrix;
use regmerge::merging::{regcl_step, regmean_checkpoints, MergeConfig, MergeState};
use regmerge::model::{fold_adapters, Checkpoint};
use regmerge::Error;

/// Result code of every fallible `rm_*` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmStatus {
    /// The call succeeded.
    Ok = 0,
    /// Reading or writing a file failed.
    Io = 1,
    /// An argument, path, or file content was rejected.
    Validation = 2,
    /// A numerical failure: singular Gram system or diverged training.
    Numerical = 3,
    /// Checkpoints disagree on layer names, shapes, or kinds.
    Topology = 4,
    /// An internal invariant was violated; the handle state is unspecified.
    Panic = 5,
}

/// A model checkpoint: named layers plus optional low-rank adapters.
pub struct RmCheckpoint(Checkpoint);

/// Per-layer Gram matrices captured during training.
pub struct RmGrams(BTreeMap<String, GramMatrix>);

/// Incremental merge state: Gram accumulators plus the running merged model.
pub struct RmMergeState(MergeState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn store_message(msg: &str) {
    // Interior NULs cannot come from our error displays, but never panic here.
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(err: &Error) -> RmStatus {
    store_message(&err.to_string());
    match err {
        Error::Io(_) => RmStatus::Io,
        Error::Validation(_) | Error::Json(_) => RmStatus::Validation,
        Error::SingularGram | Error::TrainingDiverged { .. } => RmStatus::Numerical,
        Error::TopologyDrift(_) => RmStatus::Topology,
    }
}

fn fail_validation(msg: impl Into<String>) -> RmStatus {
    store_message(&msg.into());
    RmStatus::Validation
}

/// Run a body, converting panics into `RmStatus::Panic` instead of unwinding
/// across the C boundary.
fn guarded(body: impl FnOnce() -> RmStatus) -> RmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            store_message(&format!("internal panic: {msg}"));
            RmStatus::Panic
        }
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string or null.
unsafe fn path_arg(path: *const c_char, what: &str) -> Result<PathBuf, RmStatus> {
    if path.is_null() {
        return Err(fail_validation(format!("{what}: path is null")));
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail_validation(format!("{what}: path is not valid UTF-8"))),
    }
}

/// # Safety
/// `ptr` must be null or a live handle of the right type.
unsafe fn handle_arg<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, RmStatus> {
    match ptr.as_ref() {
        Some(r) => Ok(r),
        None => Err(fail_validation(format!("{what}: handle is null"))),
    }
}

unsafe fn out_arg<'a, T>(out: *mut *mut T, what: &str) -> Result<&'a mut *mut T, RmStatus> {
    match out.as_mut() {
        Some(slot) => {
            *slot = ptr::null_mut();
            Ok(slot)
        }
        None => Err(fail_validation(format!("{what}: out pointer is null"))),
    }
}

macro_rules! try_ffi {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

fn ok_boxed<T>(slot: &mut *mut T, value: T) -> RmStatus {
    *slot = Box::into_raw(Box::new(value));
    RmStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread, empty if none yet. The pointer
/// stays valid until the next failing `rm_*` call on the same thread.
#[no_mangle]
pub extern "C" fn rm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a checkpoint from a JSON file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_checkpoint_load(
    path: *const c_char,
    out: *mut *mut RmCheckpoint,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_checkpoint_load"));
        let path = try_ffi!(path_arg(path, "rm_checkpoint_load"));
        match load_checkpoint(&path) {
            Ok(ckpt) => ok_boxed(slot, RmCheckpoint(ckpt)),
            Err(e) => fail(&e),
        }
    })
}

/// Write a checkpoint to a JSON file, creating parent directories.
///
/// # Safety
/// `ckpt` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rm_checkpoint_save(
    ckpt: *const RmCheckpoint,
    path: *const c_char,
) -> RmStatus {
    guarded(|| {
        let ckpt = try_ffi!(handle_arg(ckpt, "rm_checkpoint_save"));
        let path = try_ffi!(path_arg(path, "rm_checkpoint_save"));
        match save_checkpoint(&path, &ckpt.0) {
            Ok(()) => RmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Produce an adapter-free copy with every adapter delta added onto its host.
///
/// # Safety
/// `ckpt` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_checkpoint_fold(
    ckpt: *const RmCheckpoint,
    out: *mut *mut RmCheckpoint,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_checkpoint_fold"));
        let ckpt = try_ffi!(handle_arg(ckpt, "rm_checkpoint_fold"));
        match fold_adapters(&ckpt.0) {
            Ok(folded) => ok_boxed(slot, RmCheckpoint(folded)),
            Err(e) => fail(&e),
        }
    })
}

/// Release a checkpoint handle. Null is a no-op.
///
/// # Safety
/// `ckpt` must be null or a pointer obtained from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rm_checkpoint_free(ckpt: *mut RmCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Load per-layer Gram matrices from a JSON file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_grams_load(path: *const c_char, out: *mut *mut RmGrams) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_grams_load"));
        let path = try_ffi!(path_arg(path, "rm_grams_load"));
        match load_grams(&path) {
            Ok(grams) => ok_boxed(slot, RmGrams(grams)),
            Err(e) => fail(&e),
        }
    })
}

/// Write per-layer Gram matrices to a JSON file.
///
/// # Safety
/// `grams` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rm_grams_save(grams: *const RmGrams, path: *const c_char) -> RmStatus {
    guarded(|| {
        let grams = try_ffi!(handle_arg(grams, "rm_grams_save"));
        let path = try_ffi!(path_arg(path, "rm_grams_save"));
        match save_grams(&path, &grams.0) {
            Ok(()) => RmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Release a Gram-map handle. Null is a no-op.
///
/// # Safety
/// `grams` must be null or a pointer obtained from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rm_grams_free(grams: *mut RmGrams) {
    if !grams.is_null() {
        drop(Box::from_raw(grams));
    }
}

/// Create an empty merge state.
///
/// `lora_strategy` selects how adapter-bearing checkpoints merge:
/// `"composite"` or `"factor_mean"`; null means `"composite"`.
///
/// # Safety
/// `lora_strategy` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_state_new(
    ridge_scale: f64,
    offdiag_scale: f64,
    lora_strategy: *const c_char,
    out: *mut *mut RmMergeState,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_state_new"));
        let mut config = MergeConfig {
            ridge_scale,
            offdiag_scale,
            ..MergeConfig::default()
        };
        if !lora_strategy.is_null() {
            let text = match CStr::from_ptr(lora_strategy).to_str() {
                Ok(s) => s,
                Err(_) => return fail_validation("rm_state_new: lora_strategy is not valid UTF-8"),
            };
            config.lora_strategy = match text.parse() {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
        }
        if let Err(e) = config.validate() {
            return fail(&e);
        }
        ok_boxed(slot, RmMergeState(MergeState::new(config)))
    })
}

/// Load a merge state from a JSON file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_state_load(
    path: *const c_char,
    out: *mut *mut RmMergeState,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_state_load"));
        let path = try_ffi!(path_arg(path, "rm_state_load"));
        match load_state(&path) {
            Ok(state) => ok_boxed(slot, RmMergeState(state)),
            Err(e) => fail(&e),
        }
    })
}

/// Write a merge state to a JSON file.
///
/// # Safety
/// `state` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rm_state_save(
    state: *const RmMergeState,
    path: *const c_char,
) -> RmStatus {
    guarded(|| {
        let state = try_ffi!(handle_arg(state, "rm_state_save"));
        let path = try_ffi!(path_arg(path, "rm_state_save"));
        match save_state(&path, &state.0) {
            Ok(()) => RmStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Absorb one task checkpoint into the state. The checkpoint must be
/// adapter-free (see `rm_checkpoint_fold`); on failure the state is unchanged.
///
/// # Safety
/// All three arguments must be live handles; `state` must not alias them.
#[no_mangle]
pub unsafe extern "C" fn rm_state_step(
    state: *mut RmMergeState,
    ckpt: *const RmCheckpoint,
    grams: *const RmGrams,
) -> RmStatus {
    guarded(|| {
        let state = match state.as_mut() {
            Some(s) => s,
            None => return fail_validation("rm_state_step: handle is null"),
        };
        let ckpt = try_ffi!(handle_arg(ckpt, "rm_state_step"));
        let grams = try_ffi!(handle_arg(grams, "rm_state_step"));
        match regcl_step(&state.0, &ckpt.0, &grams.0) {
            Ok(next) => {
                state.0 = next;
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of tasks absorbed so far; 0 for a null handle.
///
/// # Safety
/// `state` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rm_state_task_count(state: *const RmMergeState) -> u64 {
    state.as_ref().map_or(0, |s| s.0.task_count)
}

/// Copy the current merged checkpoint out of the state. Fails on a fresh
/// state that has absorbed no tasks.
///
/// # Safety
/// `state` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_state_merged(
    state: *const RmMergeState,
    out: *mut *mut RmCheckpoint,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_state_merged"));
        let state = try_ffi!(handle_arg(state, "rm_state_merged"));
        match &state.0.merged {
            Some(ckpt) => ok_boxed(slot, RmCheckpoint(ckpt.clone())),
            None => fail_validation("rm_state_merged: state has absorbed no tasks"),
        }
    })
}

/// Release a merge-state handle. Null is a no-op.
///
/// # Safety
/// `state` must be null or a pointer obtained from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rm_state_free(state: *mut RmMergeState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Merge `n` checkpoints in one shot with their Gram matrices. `ckpts[i]`
/// pairs with `grams[i]`; all checkpoints must share one topology.
///
/// # Safety
/// `ckpts` and `grams` must point to `n` live handles each; `lora_strategy`
/// must be null or NUL-terminated; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn rm_regmean(
    ckpts: *const *const RmCheckpoint,
    grams: *const *const RmGrams,
    n: usize,
    ridge_scale: f64,
    offdiag_scale: f64,
    lora_strategy: *const c_char,
    out: *mut *mut RmCheckpoint,
) -> RmStatus {
    guarded(|| {
        let slot = try_ffi!(out_arg(out, "rm_regmean"));
        if n == 0 {
            return fail_validation("rm_regmean: need at least one checkpoint");
        }
        if ckpts.is_null() || grams.is_null() {
            return fail_validation("rm_regmean: handle array is null");
        }
        let mut config_out: *mut RmMergeState = ptr::null_mut();
        let status = rm_state_new(ridge_scale, offdiag_scale, lora_strategy, &mut config_out);
        if status != RmStatus::Ok {
            return status;
        }
        let config = Box::from_raw(config_out).0.config;
        let mut tasks = Vec::with_capacity(n);
        for i in 0..n {
            let ckpt = try_ffi!(handle_arg(*ckpts.add(i), "rm_regmean"));
            let gram = try_ffi!(handle_arg(*grams.add(i), "rm_regmean"));
            tasks.push((ckpt.0.clone(), gram.0.clone()));
        }
        match regmean_checkpoints(&tasks, &config) {
            Ok(merged) => ok_boxed(slot, RmCheckpoint(merged)),
            Err(e) => fail(&e),
        }
    })
}

/// Evaluate a checkpoint on a dataset file; writes mean IoU, mean F1, and
/// mean absolute error through the three out pointers (any may be null).
///
/// # Safety
/// `ckpt` must be a live handle; `dataset_path` must be NUL-terminated;
/// non-null metric pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rm_eval(
    ckpt: *const RmCheckpoint,
    dataset_path: *const c_char,
    miou: *mut f64,
    mf1: *mut f64,
    mmae: *mut f64,
) -> RmStatus {
    guarded(|| {
        let ckpt = try_ffi!(handle_arg(ckpt, "rm_eval"));
        let path = try_ffi!(path_arg(dataset_path, "rm_eval"));
        let dataset = match load_dataset(&path) {
            Ok(d) => d,
            Err(e) => return fail(&e),
        };
        match evaluate_checkpoint(&ckpt.0, &dataset) {
            Ok(metrics) => {
                if !miou.is_null() {
                    *miou = metrics.miou;
                }
                if !mf1.is_null() {
                    *mf1 = metrics.mf1;
                }
                if !mmae.is_null() {
                    *mmae = metrics.mmae;
                }
                RmStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
