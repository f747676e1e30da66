//! C interface to `ssda`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns an
//! [`SsdaStatus`]; on failure [`ssda_last_error`] describes the cause for the
//! calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::Array2;
use ssda::config::RunConfig;
use ssda::forecaster::{self, ModelParams};
use ssda::{ntf, pipeline, spectral, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numerical = 5,
    Panic = 6,
}

/// Run configuration.
pub struct SsdaConfig {
    inner: RunConfig,
}

/// Model parameters together with the configuration that shaped them.
pub struct SsdaModel {
    cfg: RunConfig,
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SsdaStatus {
    match e {
        Error::Io { .. } | Error::TensorFile(_) | Error::Csv(_) | Error::Json(_) => SsdaStatus::Io,
        Error::Config(_) | Error::NonNumeric { .. } | Error::RaggedRow { .. } | Error::ImageFormat(_) => {
            SsdaStatus::Config
        }
        Error::Shape(_) | Error::InsufficientData(_) => SsdaStatus::InvalidArgument,
        Error::NonFinite(_) | Error::MissingCache(_) => SsdaStatus::Numerical,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SsdaStatus, String)>) -> SsdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsdaStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SsdaStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SsdaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SsdaStatus, String) {
    (SsdaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SsdaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SsdaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn ssda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn ssda_config_new() -> *mut SsdaConfig {
    Box::into_raw(Box::new(SsdaConfig {
        inner: RunConfig::default(),
    }))
}

/// Reads a `key = value` file on top of the defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssda_config_load(path: *const c_char, out: *mut *mut SsdaConfig) -> SsdaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let inner = ssda::config::parse_config::<&str>(Some(&path), &[]).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsdaConfig { inner }));
        Ok(())
    })
}

/// Sets one key.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssda_config_set(cfg: *mut SsdaConfig, key: *const c_char, value: *const c_char) -> SsdaStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let (k, v) = (str_arg(key, "key")?, str_arg(value, "value")?);
        cfg.inner.set(k, v).map_err(lib)
    })
}

/// # Safety
/// `cfg` must come from this library or be null, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssda_config_free(cfg: *mut SsdaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Freshly initialized model seeded from the configuration.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_new(cfg: *const SsdaConfig, out: *mut *mut SsdaModel) -> SsdaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        cfg.inner.validate().map_err(lib)?;
        let params = pipeline::init_model(&cfg.inner).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsdaModel {
            cfg: cfg.inner.clone(),
            params,
        }));
        Ok(())
    })
}

/// Loads a checkpoint written by `ssda train` or [`ssda_model_save`].
///
/// # Safety
/// `cfg` must come from this library, `path` be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_load(
    cfg: *const SsdaConfig,
    path: *const c_char,
    out: *mut *mut SsdaModel,
) -> SsdaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        cfg.inner.validate().map_err(lib)?;
        let blank = pipeline::init_model(&cfg.inner).map_err(lib)?;
        let params = ntf::load_into(path, &blank).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsdaModel {
            cfg: cfg.inner.clone(),
            params,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_save(model: *const SsdaModel, path: *const c_char) -> SsdaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        ntf::save(str_arg(path, "path")?, &m.params).map_err(lib)
    })
}

/// Current fusion weight.
///
/// # Safety
/// `model` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_beta(model: *const SsdaModel, out: *mut f64) -> SsdaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.params.beta;
        Ok(())
    })
}

/// Forecasts `horizon` steps from a row-major `[lookback × n_vars]` context.
/// `out` receives `horizon × n_vars` values, row-major.
///
/// # Safety
/// `context` must hold `lookback·n_vars` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_forecast(
    model: *const SsdaModel,
    context: *const f64,
    lookback: usize,
    n_vars: usize,
    horizon: usize,
    out: *mut f64,
    out_len: usize,
) -> SsdaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if context.is_null() {
            return Err(null("context"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n_in = lookback
            .checked_mul(n_vars)
            .ok_or_else(|| (SsdaStatus::InvalidArgument, "context size overflows".to_string()))?;
        if out_len != horizon.saturating_mul(n_vars) {
            return Err((
                SsdaStatus::InvalidArgument,
                format!("out holds {out_len} values, forecast needs {}", horizon * n_vars),
            ));
        }
        let ctx = std::slice::from_raw_parts(context, n_in).to_vec();
        let ctx = Array2::from_shape_vec((lookback, n_vars), ctx)
            .map_err(|e| (SsdaStatus::InvalidArgument, e.to_string()))?;
        let y = forecaster::predict(&m.params, ctx, horizon, m.cfg.norm_const).map_err(lib)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, v) in dst.iter_mut().zip(y.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssda_model_free(model: *mut SsdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Power-spectrum slope of a row-major `height × width` image over
/// `f_lo < f < f_hi`.
///
/// # Safety
/// `pixels` must hold `height·width` values; `alpha` and `r_squared` must be
/// valid (`r_squared` may be null).
#[no_mangle]
pub unsafe extern "C" fn ssda_pss_image(
    pixels: *const f64,
    height: usize,
    width: usize,
    f_lo: f64,
    f_hi: f64,
    alpha: *mut f64,
    r_squared: *mut f64,
) -> SsdaStatus {
    guard(|| {
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let a = alpha.as_mut().ok_or_else(|| null("alpha"))?;
        if height < 2 || width < 2 {
            return Err((SsdaStatus::InvalidArgument, format!("image {height}x{width} is too small")));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| (SsdaStatus::InvalidArgument, "image size overflows".to_string()))?;
        let img = Array2::from_shape_vec((height, width), std::slice::from_raw_parts(pixels, n).to_vec())
            .map_err(|e| (SsdaStatus::InvalidArgument, e.to_string()))?;
        let fit = spectral::pss_of_image(img.view(), f_lo, f_hi).map_err(lib)?;
        *a = fit.alpha;
        if let Some(r) = r_squared.as_mut() {
            *r = fit.r_squared;
        }
        Ok(())
    })
}

/// Runs the command-line front end with `argv` (including the program
/// name) and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ssda_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return 2;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        let p = *argv.add(i);
        if p.is_null() {
            set_error("argv entry is null");
            return 2;
        }
        args.push(CStr::from_ptr(p).to_string_lossy().into_owned());
    }
    catch_unwind(|| ssda::cli::run(args)).unwrap_or_else(|_| {
        set_error("internal panic");
        2
    })
}
