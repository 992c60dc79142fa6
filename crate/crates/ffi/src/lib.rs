//! C ABI for embedding the search engine: opaque handles, integer status
//! codes, and a thread-local last-error message.
//!
//! Conventions:
//!  - Constructors return `NULL` on failure; calls that write through an out
//!    pointer return an [`RnasStatus`]. Either way the failure message is
//!    readable via [`rnas_last_error`] until the next failing call on the
//!    same thread.
//!  - `char *` values returned by accessors are owned by the caller and
//!    reclaimed with [`rnas_string_free`].
//!  - Every entry point catches panics and reports them as
//!    [`RnasStatus::Panicked`] instead of unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr::null_mut;

use robustnas::harness::{run, selfcheck, ExperimentConfig, RunResult};
use robustnas::space::{enumerate_space, SpaceSpec};

// ── status codes and error reporting ────────────────────────────────────────

/// Outcome of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnasStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArg = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration failed to parse or validate.
    BadConfig = 3,
    /// The engine reported an error while running.
    RunFailed = 4,
    /// An internal panic was caught at the boundary.
    Panicked = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul stripped"));
}

/// Run `body`, translating a panic into `fallback` plus a last-error message.
fn guarded<T>(fallback: T, body: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(v) => v,
        Err(_) => {
            set_error("internal panic caught at the C boundary");
            fallback
        }
    }
}

/// Borrow a C string argument, recording the failure kind on error.
///
/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, RnasStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(RnasStatus::NullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        RnasStatus::InvalidUtf8
    })
}

fn own_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul stripped").into_raw()
}

/// Message for the most recent failure on this thread; the empty string when
/// nothing has failed. The pointer stays valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn rnas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn rnas_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ── opaque handles ──────────────────────────────────────────────────────────

/// A parsed and validated experiment configuration.
pub struct RnasExperiment {
    cfg: ExperimentConfig,
}

/// The outcome of one completed run.
pub struct RnasResult {
    result: RunResult,
}

// ── spaces ──────────────────────────────────────────────────────────────────

/// Number of distinct genotypes in a named space preset (e.g. 81 for "T5").
#[no_mangle]
pub extern "C" fn rnas_space_size(name: *const c_char, out: *mut usize) -> RnasStatus {
    guarded(RnasStatus::Panicked, || {
        if out.is_null() {
            set_error("null out pointer");
            return RnasStatus::NullArg;
        }
        let name = match unsafe { read_str(name) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let spec = match SpaceSpec::preset(name) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return RnasStatus::BadConfig;
            }
        };
        match enumerate_space(&spec, spec.keep_per_node) {
            Ok(genotypes) => {
                unsafe { *out = genotypes.len() };
                RnasStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                RnasStatus::RunFailed
            }
        }
    })
}

// ── experiments ─────────────────────────────────────────────────────────────

/// Parse and validate a JSON experiment configuration (the same document a
/// run echoes to `config.json`). Returns `NULL` on error.
#[no_mangle]
pub extern "C" fn rnas_experiment_from_json(json: *const c_char) -> *mut RnasExperiment {
    guarded(null_mut(), || {
        let json = match unsafe { read_str(json) } {
            Ok(s) => s,
            Err(_) => return null_mut(),
        };
        let cfg: ExperimentConfig = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("config parse: {e}"));
                return null_mut();
            }
        };
        if let Err(e) = cfg.validate() {
            set_error(&e.to_string());
            return null_mut();
        }
        Box::into_raw(Box::new(RnasExperiment { cfg }))
    })
}

#[no_mangle]
pub extern "C" fn rnas_experiment_free(exp: *mut RnasExperiment) {
    if !exp.is_null() {
        unsafe { drop(Box::from_raw(exp)) };
    }
}

/// Execute the experiment into `out_dir` (created if missing), writing the
/// usual run artifacts there. Returns `NULL` on error.
#[no_mangle]
pub extern "C" fn rnas_experiment_run(
    exp: *const RnasExperiment,
    out_dir: *const c_char,
) -> *mut RnasResult {
    guarded(null_mut(), || {
        if exp.is_null() {
            set_error("null experiment handle");
            return null_mut();
        }
        let dir = match unsafe { read_str(out_dir) } {
            Ok(s) => s,
            Err(_) => return null_mut(),
        };
        let cfg = unsafe { &(*exp).cfg };
        match run(cfg, Path::new(dir)) {
            Ok(artifacts) => Box::into_raw(Box::new(RnasResult { result: artifacts.result })),
            Err(e) => {
                set_error(&e.to_string());
                null_mut()
            }
        }
    })
}

// ── results ─────────────────────────────────────────────────────────────────

unsafe fn result_ref<'a>(res: *const RnasResult) -> Option<&'a RunResult> {
    if res.is_null() {
        set_error("null result handle");
        None
    } else {
        Some(&(*res).result)
    }
}

/// The returned genotype as a string; reclaim with [`rnas_string_free`].
#[no_mangle]
pub extern "C" fn rnas_result_genotype(res: *const RnasResult) -> *mut c_char {
    guarded(null_mut(), || match unsafe { result_ref(res) } {
        Some(r) => own_string(r.genotype.clone()),
        None => null_mut(),
    })
}

/// The full result document as pretty-printed JSON; reclaim with
/// [`rnas_string_free`].
#[no_mangle]
pub extern "C" fn rnas_result_json(res: *const RnasResult) -> *mut c_char {
    guarded(null_mut(), || match unsafe { result_ref(res) } {
        Some(r) => match serde_json::to_string_pretty(r) {
            Ok(s) => own_string(s),
            Err(e) => {
                set_error(&e.to_string());
                null_mut()
            }
        },
        None => null_mut(),
    })
}

/// Test regret against the configured oracle; NaN when no oracle was given.
#[no_mangle]
pub extern "C" fn rnas_result_test_regret(res: *const RnasResult) -> f64 {
    guarded(f64::NAN, || match unsafe { result_ref(res) } {
        Some(r) => r.test_regret.unwrap_or(f64::NAN),
        None => f64::NAN,
    })
}

/// Final dominant eigenvalue of the architecture Hessian; NaN when the
/// strategy does not track curvature.
#[no_mangle]
pub extern "C" fn rnas_result_final_lambda_max(res: *const RnasResult) -> f64 {
    guarded(f64::NAN, || match unsafe { result_ref(res) } {
        Some(r) => r.final_lambda_max.unwrap_or(f64::NAN),
        None => f64::NAN,
    })
}

/// Epoch whose snapshot was returned when early stopping fired, else -1.
#[no_mangle]
pub extern "C" fn rnas_result_stop_epoch(res: *const RnasResult) -> i64 {
    guarded(-1, || match unsafe { result_ref(res) } {
        Some(r) => r.stop_epoch.map_or(-1, |e| e as i64),
        None => -1,
    })
}

/// Number of search epochs actually run.
#[no_mangle]
pub extern "C" fn rnas_result_epochs_run(res: *const RnasResult) -> u64 {
    guarded(0, || match unsafe { result_ref(res) } {
        Some(r) => r.epochs_run as u64,
        None => 0,
    })
}

#[no_mangle]
pub extern "C" fn rnas_result_free(res: *mut RnasResult) {
    if !res.is_null() {
        unsafe { drop(Box::from_raw(res)) };
    }
}

// ── diagnostics ─────────────────────────────────────────────────────────────

/// Run the built-in analytic self-checks; returns the number of failing
/// checks (0 means all pass), or -1 on an internal error.
#[no_mangle]
pub extern "C" fn rnas_selfcheck() -> i32 {
    guarded(-1, || selfcheck().iter().filter(|line| !line.pass).count() as i32)
}

/// Reclaim a string returned by this library.
#[no_mangle]
pub extern "C" fn rnas_string_free(s: *mut c_char) {
    if !s.is_null() {
        unsafe { drop(CString::from_raw(s)) };
    }
}
