//! C ABI over the `hvp` sampler.
//!
//! A model is created from config text, optionally loaded with a policy
//! checkpoint, and then used to draw conditional samples for an observation.
//! Every call returns an [`HvpStatus`]; on failure the message is available
//! from [`hvp_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};

use hvp::diffusion::{GmmOracleDenoiser, NoiseSchedule};
use hvp::error::HvpError;
use hvp::harness::io::{load_checkpoint, ScheduleParams};
use hvp::harness::ExperimentConfig;
use hvp::policies::PolicyPair;
use hvp::tasks::{ForwardTask, Observation};
use hvp::training::{sample_method, EvalConfig, EvalMode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Sampling methods accepted by [`hvp_sample`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpMethod {
    Unguided = 0,
    Stage1Only = 1,
    Ahvp = 2,
    AhvpDet = 3,
    Shvp = 4,
}

/// Evaluations spent per trajectory by one sampling call. The line-search
/// field is the total over all rows.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HvpCallCounts {
    pub noise_policy: u64,
    pub policy: u64,
    pub denoiser: u64,
    pub inner_iterations: u64,
    pub line_search_evals: u64,
}

/// Opaque model handle.
pub struct HvpModel {
    cfg: ExperimentConfig,
    task: ForwardTask,
    sched: NoiseSchedule,
    den: GmmOracleDenoiser,
    pols: PolicyPair,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &HvpError) -> HvpStatus {
    match e {
        HvpError::Config(_) | HvpError::Parameter(_) | HvpError::Schedule(_) | HvpError::Contract(_) => {
            HvpStatus::InvalidArgument
        }
        HvpError::Dimension(_) => HvpStatus::Dimension,
        HvpError::Numeric { .. } | HvpError::Tolerance(_) => HvpStatus::Numeric,
        HvpError::Io(_) | HvpError::Format(_) => HvpStatus::Io,
    }
}

struct Fail(HvpStatus, String);

impl From<HvpError> for Fail {
    fn from(e: HvpError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HvpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HvpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HvpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HvpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(HvpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: size_t, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(m: *const HvpModel) -> Result<&'a HvpModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Builds a model from config text with zero-initialized policies.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hvp_model_from_config(config: *const c_char, out: *mut *mut HvpModel) -> HvpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::parse(str_arg(config, "config")?)?;
        let model = HvpModel {
            task: cfg.task()?,
            sched: cfg.schedule()?,
            den: GmmOracleDenoiser::new(cfg.build_prior()?),
            pols: cfg.policies()?,
            cfg,
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Replaces the model's policies with those stored in a checkpoint file.
///
/// # Safety
/// `model` must come from [`hvp_model_from_config`]; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hvp_model_load_checkpoint(model: *mut HvpModel, path: *const c_char) -> HvpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let (pols, params) = load_checkpoint(str_arg(path, "path")?)?;
        if params != ScheduleParams::of(&m.sched) {
            return Err(Fail(HvpStatus::InvalidArgument, "checkpoint schedule differs from the model's".into()));
        }
        if pols.dim() != m.task.dim() || pols.cond_dim() != m.task.cond_dim() {
            return Err(Fail(HvpStatus::Dimension, "checkpoint dimensions differ from the model's".into()));
        }
        m.pols = pols;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hvp_model_from_config`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn hvp_model_free(model: *mut HvpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Signal dimension, measurement dimension and number of reverse steps.
/// Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hvp_model_dims(
    model: *const HvpModel,
    dim: *mut size_t,
    measurement_dim: *mut size_t,
    steps: *mut size_t,
) -> HvpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if let Some(d) = dim.as_mut() {
            *d = m.task.dim();
        }
        if let Some(k) = measurement_dim.as_mut() {
            *k = m.task.measurement_dim();
        }
        if let Some(t) = steps.as_mut() {
            *t = m.sched.steps();
        }
        Ok(())
    })
}

fn method_of(code: i32) -> Result<EvalMode, Fail> {
    Ok(match code {
        0 => EvalMode::Unguided,
        1 => EvalMode::Stage1Only,
        2 => EvalMode::Ahvp,
        3 => EvalMode::AhvpDet,
        4 => EvalMode::Shvp,
        _ => return Err(Fail(HvpStatus::InvalidArgument, format!("unknown method {code}"))),
    })
}

/// Draws `n_samples` conditional samples for observation `y` into `out`
/// (row-major, `n_samples * dim` values). `mask` is read only for
/// random-mask tasks and may otherwise be null. `counts` may be null.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hvp_sample(
    model: *const HvpModel,
    y: *const f64,
    y_len: size_t,
    mask: *const f64,
    mask_len: size_t,
    n_samples: size_t,
    seed: u64,
    method: i32,
    out: *mut f64,
    out_len: size_t,
    counts: *mut HvpCallCounts,
) -> HvpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let mode = method_of(method)?;
        let y = slice_arg(y, y_len, "y")?.to_vec();
        if y.len() != m.task.measurement_dim() {
            return Err(Fail(
                HvpStatus::Dimension,
                format!("y has {} entries, task expects {}", y.len(), m.task.measurement_dim()),
            ));
        }
        let mask = if m.task.has_random_mask() {
            let s = slice_arg(mask, mask_len, "mask")?;
            if s.len() != m.task.dim() {
                return Err(Fail(HvpStatus::Dimension, "mask must have one entry per coordinate".into()));
            }
            Some(s.to_vec())
        } else {
            None
        };
        let d = m.task.dim();
        let need = n_samples
            .checked_mul(d)
            .ok_or_else(|| Fail(HvpStatus::InvalidArgument, "sample count overflows".into()))?;
        if out_len < need {
            return Err(Fail(HvpStatus::BufferTooSmall, format!("output holds {out_len} values, need {need}")));
        }
        if need == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let obs = Observation {
            id: 0,
            seed,
            y,
            mask,
            truth: vec![0.0; d],
        };
        let ecfg = EvalConfig {
            rollouts_per_obs: n_samples,
            seed,
            refine: m.cfg.refine,
            ..EvalConfig::default()
        };
        let (_, traj) = sample_method(&m.pols, &m.den, &m.sched, &m.task, &[&obs], mode, &ecfg)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(traj.samples().data());
        if let Some(c) = counts.as_mut() {
            let k = traj.counts;
            *c = HvpCallCounts {
                noise_policy: k.noise_policy,
                policy: k.policy,
                denoiser: k.denoiser,
                inner_iterations: k.inner_iterations,
                line_search_evals: k.line_search_evals,
            };
        }
        Ok(())
    })
}

/// Measurement log-likelihood `log p(y | x)` under the model's task.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hvp_log_likelihood(
    model: *const HvpModel,
    y: *const f64,
    y_len: size_t,
    x: *const f64,
    x_len: size_t,
    mask: *const f64,
    mask_len: size_t,
    out: *mut f64,
) -> HvpStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let y = slice_arg(y, y_len, "y")?;
        let x = slice_arg(x, x_len, "x")?;
        let mask = if mask.is_null() { None } else { Some(slice_arg(mask, mask_len, "mask")?) };
        *out = m.task.log_likelihood_with(y, x, mask)?;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hvp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hvp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
