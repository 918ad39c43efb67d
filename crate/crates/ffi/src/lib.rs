//! C ABI over `lmmsel`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible function returns an
//! [`LmmselStatus`]; on failure `lmmsel_last_error()` describes the cause
//! for the calling thread. Matrices are column-major.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use lmmsel::ecm::{self, EcmConfig, FitResult};
use lmmsel::model::{find_intercept, Covariate, GroupingFactor, MixedModelData, RandomEffectSpec};
use lmmsel::penalized_ls::SelectorKind;
use lmmsel::tuning::{self, Criterion, TuneConfig};
use lmmsel::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmselStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmselSelector {
    Lasso = 0,
    AdaptiveLasso = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmselCriterion {
    Bic = 0,
    Ebic = 1,
}

/// Response, design and random-effect specification.
pub struct LmmselData {
    y: DVector<f64>,
    x: DMatrix<f64>,
    effects: Vec<RandomEffectSpec>,
    penalize_intercept: bool,
}

/// Result of a fit or of a tuning run.
pub struct LmmselFit {
    fit: FitResult,
    q: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LmmselStatus {
    match e {
        Error::Config(_) => LmmselStatus::InvalidArgument,
        Error::Data(_)
        | Error::Dimension(_)
        | Error::Grouping(_)
        | Error::DegenerateColumn { .. }
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => LmmselStatus::DataError,
        _ => LmmselStatus::NumericError,
    }
}

fn fail(status: LmmselStatus, msg: &str) -> LmmselStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), LmmselStatus>) -> LmmselStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LmmselStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(LmmselStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: lmmsel::Result<T>) -> Result<T, LmmselStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], LmmselStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(LmmselStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, LmmselStatus> {
    p.as_ref().ok_or_else(|| fail(LmmselStatus::NullPointer, "null handle"))
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), LmmselStatus> {
    if len < values.len() {
        return Err(fail(
            LmmselStatus::BufferTooSmall,
            &format!("buffer holds {len} values, {} required", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(fail(LmmselStatus::NullPointer, "output buffer is null"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

impl LmmselData {
    fn build(&self) -> lmmsel::Result<MixedModelData> {
        let mut free = BTreeSet::new();
        if !self.penalize_intercept {
            if let Some(j) = find_intercept(&self.x) {
                free.insert(j);
            }
        }
        MixedModelData::new(self.y.clone(), self.x.clone(), None, self.effects.clone(), free)
    }
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lmmsel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lmmsel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a data handle from `y` (length `n`) and the column-major `n x p`
/// design `x`.
///
/// # Safety
/// `y` must point to `n` doubles, `x` to `n * p` doubles and `out` to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_data_new(
    n: usize,
    p: usize,
    y: *const f64,
    x: *const f64,
    out: *mut *mut LmmselData,
) -> LmmselStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(LmmselStatus::NullPointer, "out is null"));
        }
        if n == 0 || p == 0 {
            return Err(fail(LmmselStatus::InvalidArgument, "n and p must be positive"));
        }
        let len = n
            .checked_mul(p)
            .ok_or_else(|| fail(LmmselStatus::InvalidArgument, "n * p overflows"))?;
        let y = input(y, n, "y")?;
        let x = input(x, len, "x")?;
        let data = LmmselData {
            y: DVector::from_column_slice(y),
            x: DMatrix::from_column_slice(n, p, x),
            effects: Vec::new(),
            penalize_intercept: false,
        };
        *out = Box::into_raw(Box::new(data));
        Ok(())
    })
}

/// Adds a random effect grouped by the 0-based `levels` (length `n`).
/// `column < 0` gives a random intercept, otherwise a slope on that column
/// of X.
///
/// # Safety
/// `data` must be a live handle, `name` a NUL-terminated string or null,
/// and `levels` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_data_add_effect(
    data: *mut LmmselData,
    name: *const c_char,
    levels: *const u32,
    n: usize,
    column: i64,
) -> LmmselStatus {
    guard(|| {
        let d = data
            .as_mut()
            .ok_or_else(|| fail(LmmselStatus::NullPointer, "null handle"))?;
        if n != d.y.len() {
            return Err(fail(
                LmmselStatus::DataError,
                &format!("levels has length {n}, data has {} observations", d.y.len()),
            ));
        }
        let levels = input(levels, n, "levels")?;
        let name = if name.is_null() {
            format!("effect{}", d.effects.len() + 1)
        } else {
            std::ffi::CStr::from_ptr(name).to_string_lossy().into_owned()
        };
        let assignment: Vec<usize> = levels.iter().map(|&l| l as usize).collect();
        let count = assignment.iter().max().map_or(0, |m| m + 1);
        let factor = lift(GroupingFactor::new(assignment, count))?;
        let covariate = if column < 0 {
            Covariate::None
        } else if (column as usize) < d.x.ncols() {
            Covariate::Column(column as usize)
        } else {
            return Err(fail(LmmselStatus::InvalidArgument, &format!("column {column} out of range")));
        };
        d.effects.push(RandomEffectSpec {
            name,
            factor,
            covariate,
            relationship: None,
        });
        Ok(())
    })
}

/// By default an all-ones column of X is left unpenalized.
///
/// # Safety
/// `data` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_data_penalize_intercept(data: *mut LmmselData, penalize: bool) -> LmmselStatus {
    guard(|| {
        let d = data
            .as_mut()
            .ok_or_else(|| fail(LmmselStatus::NullPointer, "null handle"))?;
        d.penalize_intercept = penalize;
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle from `lmmsel_data_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_data_free(data: *mut LmmselData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

fn selector_of(s: i32) -> Result<SelectorKind, LmmselStatus> {
    match s {
        x if x == LmmselSelector::Lasso as i32 => Ok(SelectorKind::Lasso),
        x if x == LmmselSelector::AdaptiveLasso as i32 => Ok(SelectorKind::AdaptiveLasso),
        _ => Err(fail(LmmselStatus::InvalidArgument, &format!("unknown selector {s}"))),
    }
}

unsafe fn finish(out: *mut *mut LmmselFit, fit: FitResult, q: usize) {
    *out = Box::into_raw(Box::new(LmmselFit { fit, q }));
}

/// Fits at a fixed penalty `lambda`. `selector` is an `LmmselSelector`.
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit(
    data: *const LmmselData,
    lambda: f64,
    selector: i32,
    out: *mut *mut LmmselFit,
) -> LmmselStatus {
    guard(|| {
        let d = handle(data)?;
        if out.is_null() {
            return Err(fail(LmmselStatus::NullPointer, "out is null"));
        }
        let model = lift(d.build())?;
        let cfg = EcmConfig {
            lambda,
            selector: selector_of(selector)?,
            ..EcmConfig::default()
        };
        lift(cfg.validate())?;
        let fit = lift(ecm::fit(&model, &cfg))?;
        finish(out, fit, model.q());
        Ok(())
    })
}

/// Fits along a log-spaced grid of `grid_size` penalties and keeps the fit
/// minimizing `criterion` (an `LmmselCriterion`).
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_tune(
    data: *const LmmselData,
    grid_size: usize,
    selector: i32,
    criterion: i32,
    out: *mut *mut LmmselFit,
) -> LmmselStatus {
    guard(|| {
        let d = handle(data)?;
        if out.is_null() {
            return Err(fail(LmmselStatus::NullPointer, "out is null"));
        }
        let model = lift(d.build())?;
        let mut cfg = TuneConfig {
            grid_size,
            criterion: match criterion {
                x if x == LmmselCriterion::Bic as i32 => Criterion::Bic,
                x if x == LmmselCriterion::Ebic as i32 => Criterion::Ebic,
                _ => return Err(fail(LmmselStatus::InvalidArgument, &format!("unknown criterion {criterion}"))),
            },
            ..TuneConfig::default()
        };
        cfg.ecm.selector = selector_of(selector)?;
        let res = lift(tuning::tune_default_grid(&model, &cfg))?;
        finish(out, res.chosen, model.q());
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle returned by `lmmsel_fit` / `lmmsel_tune`.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_free(fit: *mut LmmselFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Copies the `p` fixed-effect estimates into `out`.
///
/// # Safety
/// `fit` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_beta(fit: *const LmmselFit, out: *mut f64, len: usize) -> LmmselStatus {
    guard(|| copy_out(&handle(fit)?.fit.state.beta, out, len))
}

/// Copies one variance per random effect (0 for deleted effects).
///
/// # Safety
/// `fit` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_sigma2(fit: *const LmmselFit, out: *mut f64, len: usize) -> LmmselStatus {
    guard(|| {
        let f = handle(fit)?;
        let v: Vec<f64> = (0..f.q).map(|k| f.fit.state.sigma2_of(k)).collect();
        copy_out(&v, out, len)
    })
}

/// Number of fixed-effect columns.
///
/// # Safety
/// `fit` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_p(fit: *const LmmselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.state.beta.len())
}

/// Number of random effects in the original specification.
///
/// # Safety
/// `fit` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_q(fit: *const LmmselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.q)
}

/// Residual variance; NaN for a null handle.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_sigma2_e(fit: *const LmmselFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.fit.state.sigma2_e)
}

/// Penalized objective (-2 log-likelihood plus penalty); NaN for null.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_objective(fit: *const LmmselFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.fit.objective)
}

/// Penalty the fit was computed at; NaN for null.
///
/// # Safety
/// `fit` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_lambda(fit: *const LmmselFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.fit.lambda)
}

/// Number of selected fixed effects.
///
/// # Safety
/// `fit` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_support_size(fit: *const LmmselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.support.len())
}

/// # Safety
/// `fit` must be a live handle or null (returns false).
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_converged(fit: *const LmmselFit) -> bool {
    fit.as_ref().is_some_and(|f| f.fit.converged)
}

/// # Safety
/// `fit` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn lmmsel_fit_iterations(fit: *const LmmselFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.iterations)
}
