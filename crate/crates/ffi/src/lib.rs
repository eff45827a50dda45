//! C interface to `pdalab`.
//!
//! Every function returns a [`PdaStatus`]; results go through out-pointers.
//! On failure a message is kept per thread and can be read with
//! [`pda_last_error`]. Handles are opaque and must be released with their
//! matching `_free` function. Panics never cross the boundary; they turn into
//! `PDA_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pdalab::config::{RunConfig, VariantSpec};
use pdalab::tensor::Tensor;
use pdalab::theory::{intermediate_terms, OracleContext, BOUND_TOLERANCE};
use pdalab::trainer::{adv_ramp, lr_at, run_experiment, MetricsTrace, Preset, Schedule};
use pdalab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    BoundViolation = 6,
    OutOfRange = 7,
    Internal = 8,
}

/// Opaque run configuration.
pub struct PdaConfig(RunConfig);

/// Opaque result of a training run.
pub struct PdaTrace(MetricsTrace);

/// Bound terms logged at one epoch.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PdaBoundTerms {
    pub w_error_l1: f64,
    pub delta_bar: f64,
    pub e_type1: f64,
    pub e_tgt_shared: f64,
    pub e_src_shared: f64,
    pub d_hdh_proxy: f64,
    pub rhs_intermediate: f64,
    pub rhs_full: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PdaStatus {
    match e {
        Error::Config(_) => PdaStatus::Config,
        Error::Io { .. } => PdaStatus::Io,
        Error::Parse { .. } | Error::Format { .. } | Error::Json(_) | Error::Csv(_) => PdaStatus::Parse,
        Error::BoundViolation { .. } => PdaStatus::BoundViolation,
        Error::Tensor(_) | Error::Invalid(_) => PdaStatus::InvalidArgument,
    }
}

struct Fail(PdaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PdaStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PdaStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(PdaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Annealed learning rate at progress `p` in [0, 1].
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn pda_lr_at(p: f64, eta0: f64, alpha: f64, beta: f64, out: *mut f64) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let sched = Schedule {
            eta0,
            alpha,
            beta,
            ..Schedule::default()
        };
        sched.validate()?;
        *out = lr_at(p, &sched)?;
        Ok(())
    })
}

/// Adversarial ramp `2 / (1 + exp(-gamma p)) - 1` at progress `p` in [0, 1].
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn pda_adv_ramp(p: f64, gamma: f64, out: *mut f64) -> PdaStatus {
    guard(|| {
        *out_arg(out, "out")? = adv_ramp(p, gamma)?;
        Ok(())
    })
}

/// Both sides of the target-side bound for `n` prediction rows of `k`
/// classes (row-major). Returns `PDA_STATUS_BOUND_VIOLATION` when
/// `lhs > rhs + 1e-9`; the terms are written either way.
///
/// # Safety
/// `preds` must hold `n * k` doubles, `shared` `n_shared` indices and
/// `labels` `n` indices; `lhs` and `rhs` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pda_check_intermediate_bound(
    preds: *const f64,
    n: usize,
    k: usize,
    shared: *const usize,
    n_shared: usize,
    labels: *const usize,
    lhs: *mut f64,
    rhs: *mut f64,
) -> PdaStatus {
    guard(|| {
        let lhs = out_arg(lhs, "lhs")?;
        let rhs = out_arg(rhs, "rhs")?;
        let len = n
            .checked_mul(k)
            .ok_or_else(|| Fail(PdaStatus::InvalidArgument, "n * k overflows".into()))?;
        let preds = Tensor::matrix(n, k, slice_arg(preds, len, "preds")?.to_vec()).map_err(Error::from)?;
        let oracle = OracleContext::new(
            slice_arg(shared, n_shared, "shared")?.to_vec(),
            slice_arg(labels, n, "labels")?.to_vec(),
        );
        let (l, r) = intermediate_terms(&preds, &oracle)?;
        *lhs = l;
        *rhs = r;
        if l > r + BOUND_TOLERANCE {
            return Err(Fail(PdaStatus::BoundViolation, format!("|w* - w|_1 = {l} > {r}")));
        }
        Ok(())
    })
}

/// Built-in default configuration.
///
/// # Safety
/// `out` must be a valid pointer; the handle written there is owned by the
/// caller.
#[no_mangle]
pub unsafe extern "C" fn pda_config_default(out: *mut *mut PdaConfig) -> PdaStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(PdaConfig(RunConfig::default())));
        Ok(())
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pda_config_from_toml(toml: *const c_char, out: *mut *mut PdaConfig) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::from_toml_str(str_arg(toml, "toml")?)?;
        *out = Box::into_raw(Box::new(PdaConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pda_config_set_seed(cfg: *mut PdaConfig, seed: u64) -> PdaStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

/// Sets the number of training epochs (and clamps warm-up to it).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pda_config_set_epochs(cfg: *mut PdaConfig, epochs: usize) -> PdaStatus {
    guard(|| {
        let s = &mut out_arg(cfg, "cfg")?.0.schedule;
        s.total_epochs = epochs;
        s.warmup_epochs = s.warmup_epochs.min(epochs);
        Ok(())
    })
}

/// Selects a preset by name, e.g. `"san_pp"` or `"dann"`.
///
/// # Safety
/// `cfg` must be a live handle and `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pda_config_set_variant(cfg: *mut PdaConfig, name: *const c_char) -> PdaStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        let preset: Preset = str_arg(name, "name")?.parse().map_err(|e: Error| Fail::from(e))?;
        cfg.0.variant = VariantSpec::Preset(preset);
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards. NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn pda_config_free(cfg: *mut PdaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains in memory; nothing is written to disk.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer; the trace written
/// there is owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn pda_run_experiment(cfg: *const PdaConfig, out: *mut *mut PdaTrace) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        cfg.0.validate()?;
        let trace = run_experiment(&cfg.0)?;
        *out = Box::into_raw(Box::new(PdaTrace(trace)));
        Ok(())
    })
}

unsafe fn record_at<'a>(
    trace: *const PdaTrace,
    epoch: usize,
) -> Result<&'a pdalab::trainer::MetricsRecord, Fail> {
    let trace = trace.as_ref().ok_or_else(|| null("trace"))?;
    trace
        .0
        .records
        .iter()
        .find(|r| r.epoch == epoch)
        .ok_or_else(|| Fail(PdaStatus::OutOfRange, format!("no record for epoch {epoch}")))
}

/// Number of logged records; epoch 0 is the state before training.
///
/// # Safety
/// `trace` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pda_trace_len(trace: *const PdaTrace, out: *mut usize) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = trace.as_ref().ok_or_else(|| null("trace"))?.0.records.len();
        Ok(())
    })
}

/// # Safety
/// `trace` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pda_trace_accuracy(trace: *const PdaTrace, epoch: usize, out: *mut f64) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = record_at(trace, epoch)?.target_accuracy;
        Ok(())
    })
}

/// Copies the class weights of `epoch` into `buf`. `len` is the capacity of
/// `buf`; the number of classes is always written to `written`, and
/// `PDA_STATUS_OUT_OF_RANGE` is returned when `buf` is too small.
///
/// # Safety
/// `buf` must hold `len` doubles and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pda_trace_class_weights(
    trace: *const PdaTrace,
    epoch: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> PdaStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        let w = &record_at(trace, epoch)?.w;
        *written = w.len();
        if len < w.len() {
            return Err(Fail(PdaStatus::OutOfRange, format!("buffer holds {len}, need {}", w.len())));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, w.len()).copy_from_slice(w);
        Ok(())
    })
}

/// # Safety
/// `trace` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pda_trace_bound(trace: *const PdaTrace, epoch: usize, out: *mut PdaBoundTerms) -> PdaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let b = &record_at(trace, epoch)?.bound;
        *out = PdaBoundTerms {
            w_error_l1: b.w_error_l1,
            delta_bar: b.delta_bar,
            e_type1: b.e_type1,
            e_tgt_shared: b.e_tgt_shared,
            e_src_shared: b.e_src_shared,
            d_hdh_proxy: b.d_hdh_proxy,
            rhs_intermediate: b.rhs_intermediate,
            rhs_full: b.rhs_full,
        };
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library and not be used afterwards. NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn pda_trace_free(trace: *mut PdaTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}
