//! C ABI for the `fedbac` simulator.
//!
//! Handles are opaque pointers created by `fedbac_config_from_toml` and `fedbac_run`
//! and released with the matching `*_free`. Every fallible call returns a
//! [`FedbacStatus`]; on failure the message is available from
//! [`fedbac_last_error_message`] on the same thread. Panics never cross the
//! boundary and surface as [`FedbacStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedbac::config::ExperimentConfig;
use fedbac::orchestrator::Method;
use fedbac::report::{self, RunOutput};
use fedbac::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedbacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Input = 4,
    Runtime = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// A validated experiment configuration.
pub struct FedbacConfig {
    inner: ExperimentConfig,
}

/// The per-round log and summary of one run.
pub struct FedbacTrace {
    inner: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    let c = CString::new(msg).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(FedbacStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => FedbacStatus::Config,
            Error::Input(_) => FedbacStatus::Input,
            Error::Protocol(_) | Error::Internal(_) => FedbacStatus::Runtime,
            Error::Io(_) => FedbacStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FedbacStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedbacStatus::Ok,
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
            FedbacStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FedbacStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(FedbacStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `fedbac_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fedbac_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedbac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse and validate a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_config_from_toml(toml: *const c_char, out: *mut *mut FedbacConfig) -> FedbacStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let src = read_str(toml, "toml")?;
        let inner = ExperimentConfig::from_toml_str(src)?;
        write_out(out, Box::into_raw(Box::new(FedbacConfig { inner })), "out")
    })
}

/// # Safety
/// `config` must come from [`fedbac_config_from_toml`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fedbac_config_free(config: *mut FedbacConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Number of seeds and first seed of a configuration.
///
/// # Safety
/// `config` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_config_seeds(
    config: *const FedbacConfig,
    first_seed: *mut u64,
    num_seeds: *mut usize,
) -> FedbacStatus {
    guard(|| {
        let cfg = &borrow(config, "config")?.inner;
        write_out(first_seed, cfg.seed, "first_seed")?;
        write_out(num_seeds, cfg.seeds, "num_seeds")
    })
}

/// Run one seed. `method` may be null to use the configured method, or one
/// of `"fedbac"`, `"hierfavg"`, `"ifca"`; switching method drops explicit
/// `k_max`/`participation` values so the method's defaults apply.
///
/// # Safety
/// `config` must be a live handle, `method` null or NUL-terminated, `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_run(
    config: *const FedbacConfig,
    method: *const c_char,
    seed: u64,
    out: *mut *mut FedbacTrace,
) -> FedbacStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let base = &borrow(config, "config")?.inner;
        let cfg = if method.is_null() {
            base.clone()
        } else {
            let name = read_str(method, "method")?;
            let m = Method::parse(name)
                .ok_or_else(|| Failure(FedbacStatus::Config, format!("unknown method {name:?}")))?;
            if m == base.method.name {
                base.clone()
            } else {
                base.for_method(m)
            }
        };
        let mut inner = report::run_seed(&cfg, seed)?;
        inner.summary.timestamp_unix = None;
        write_out(out, Box::into_raw(Box::new(FedbacTrace { inner })), "out")
    })
}

/// # Safety
/// `trace` must come from [`fedbac_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fedbac_trace_free(trace: *mut FedbacTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of recorded rounds.
///
/// # Safety
/// `trace` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_trace_len(trace: *const FedbacTrace, out: *mut usize) -> FedbacStatus {
    guard(|| {
        let t = borrow(trace, "trace")?;
        write_out(out, t.inner.log.len(), "out")
    })
}

/// Distributed accuracy (fraction in [0, 1]) after the round at 0-based
/// position `index`.
///
/// # Safety
/// `trace` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_trace_distributed_accuracy(
    trace: *const FedbacTrace,
    index: usize,
    out: *mut f64,
) -> FedbacStatus {
    guard(|| {
        let log = &borrow(trace, "trace")?.inner.log;
        let rec = log.get(index).ok_or_else(|| {
            Failure(FedbacStatus::OutOfRange, format!("round index {index} out of range 0..{}", log.len()))
        })?;
        write_out(out, rec.distributed_accuracy, "out")
    })
}

/// Write the per-round metrics CSV to `path`.
///
/// # Safety
/// `trace` must be a live handle, `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedbac_trace_write_csv(trace: *const FedbacTrace, path: *const c_char) -> FedbacStatus {
    guard(|| {
        let t = borrow(trace, "trace")?;
        let path = read_str(path, "path")?;
        let bytes = report::metrics_csv(&t.inner.log)?;
        report::write_atomic(Path::new(path), &bytes)?;
        Ok(())
    })
}

/// The run summary as a JSON string. Release it with [`fedbac_string_free`].
///
/// # Safety
/// `trace` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_trace_to_json(trace: *const FedbacTrace, out: *mut *mut c_char) -> FedbacStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = borrow(trace, "trace")?;
        let json = serde_json::to_string(&t.inner.summary)
            .map_err(|e| Failure(FedbacStatus::Runtime, e.to_string()))?;
        let c = CString::new(json).map_err(|e| Failure(FedbacStatus::Runtime, e.to_string()))?;
        write_out(out, c.into_raw(), "out")
    })
}

/// # Safety
/// `s` must come from a `fedbac_*` call that documents this function, or be
/// null.
#[no_mangle]
pub unsafe extern "C" fn fedbac_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Normalized loss-ratio reward `(alt - cur) / (alt + cur + eps)`.
#[no_mangle]
pub extern "C" fn fedbac_compute_reward(loss_current: f64, loss_best_alt: f64, epsilon: f64) -> f64 {
    fedbac::bandits::compute_reward(loss_current, loss_best_alt, epsilon)
}

/// Client-to-edge bytes for one round; `OutOfRange` on overflow.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedbac_comm_cost_round(
    selected_total: u64,
    d_g: u64,
    d_k: u64,
    bytes_per_param: u64,
    out: *mut u64,
) -> FedbacStatus {
    guard(|| {
        let fits = d_g
            .checked_add(d_k)
            .and_then(|d| d.checked_mul(2))
            .and_then(|d| d.checked_mul(selected_total))
            .and_then(|d| d.checked_mul(bytes_per_param));
        if fits.is_none() {
            return Err(Failure(FedbacStatus::OutOfRange, "communication cost overflows u64".into()));
        }
        write_out(out, fedbac::metrics::comm_cost_round(selected_total, d_g, d_k, bytes_per_param), "out")
    })
}
