//! C interface: load a trained checkpoint, predict arousal distributions
//! from raw 16 kHz audio and compute the evaluation metrics.
//!
//! Every function returns an [`AbnStatus`]; on failure a message is kept
//! per thread and can be copied out with [`abn_last_error`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use affect_bnn::dataset::FRAME_SAMPLES;
use affect_bnn::losses::{self, MetricError};
use affect_bnn::model::{predict_distribution, Checkpoint, Model, ModelError, SystemKind};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Output buffer too small; the required length is reported.
    BufferTooSmall = 3,
    Io = 4,
    InvalidCheckpoint = 5,
    Runtime = 6,
    Panic = 7,
}

/// Trained system inside a checkpoint.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbnSystem {
    Mu = 0,
    Lu = 1,
    Stl = 2,
    MtlPu = 3,
}

impl From<SystemKind> for AbnSystem {
    fn from(k: SystemKind) -> Self {
        match k {
            SystemKind::Mu => AbnSystem::Mu,
            SystemKind::Lu => AbnSystem::Lu,
            SystemKind::Stl => AbnSystem::Stl,
            SystemKind::MtlPu => AbnSystem::MtlPu,
        }
    }
}

/// Opaque model handle.
pub struct AbnModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: AbnStatus, msg: impl Into<String>) -> AbnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_model_error(e: ModelError) -> AbnStatus {
    let status = match &e {
        ModelError::Io { .. } => AbnStatus::Io,
        ModelError::Checkpoint(_) => AbnStatus::InvalidCheckpoint,
        ModelError::TooFewPasses(_) | ModelError::Dataset(_) => AbnStatus::InvalidArgument,
        _ => AbnStatus::Runtime,
    };
    fail(status, e.to_string())
}

fn from_metric_error(e: MetricError) -> AbnStatus {
    let status = match e {
        MetricError::Graph(_) => AbnStatus::Runtime,
        _ => AbnStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> AbnStatus) -> AbnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(AbnStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

macro_rules! require {
    ($e:expr, $name:literal) => {
        match $e {
            Some(v) => v,
            None => return fail(AbnStatus::NullPointer, concat!($name, " is null")),
        }
    };
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn abn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`abn_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_model_load(path: *const c_char, out: *mut *mut AbnModel) -> AbnStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(AbnStatus::NullPointer, "path and out must be non-null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(AbnStatus::InvalidArgument, "path is not valid UTF-8");
        };
        match Checkpoint::load(Path::new(path)) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(AbnModel { model: ck.model }));
                AbnStatus::Ok
            }
            Err(e) => from_model_error(e),
        }
    })
}

/// Releases a handle from [`abn_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abn_model_free(model: *mut AbnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_model_system(model: *const AbnModel, out: *mut AbnSystem) -> AbnStatus {
    let model = require!(model.as_ref(), "model");
    let out = require!(out.as_mut(), "out");
    *out = model.model.kind.into();
    AbnStatus::Ok
}

/// Number of 40 ms frames (and so of predictions) for `samples` audio
/// samples; `samples` must be a multiple of 640.
#[no_mangle]
pub extern "C" fn abn_frames_for_samples(samples: usize) -> usize {
    samples / FRAME_SAMPLES
}

/// Predicts one recording. `m_hat` receives the mean-weight prediction and
/// `s_hat` (may be null) the uncertainty estimate, `capacity` values each.
/// Systems without an uncertainty output fill `s_hat` with NaN. `passes`
/// is the number of stochastic passes (at least 2 for Bayesian systems).
///
/// # Safety
/// `waveform` must be valid for `samples` reads, `m_hat` and a non-null
/// `s_hat` for `capacity` writes, and `frames` for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_predict(
    model: *const AbnModel,
    waveform: *const f32,
    samples: usize,
    passes: usize,
    seed: u64,
    m_hat: *mut f64,
    s_hat: *mut f64,
    capacity: usize,
    frames: *mut usize,
) -> AbnStatus {
    guard(|| {
        let model = require!(model.as_ref(), "model");
        let wave = require!(slice(waveform, samples), "waveform");
        let frames = require!(frames.as_mut(), "frames");
        if m_hat.is_null() {
            return fail(AbnStatus::NullPointer, "m_hat is null");
        }
        if samples == 0 || samples % FRAME_SAMPLES != 0 {
            return fail(
                AbnStatus::InvalidArgument,
                format!("sample count {samples} is not a positive multiple of {FRAME_SAMPLES}"),
            );
        }
        let t = samples / FRAME_SAMPLES;
        *frames = t;
        if capacity < t {
            return fail(AbnStatus::BufferTooSmall, format!("need room for {t} frames, got {capacity}"));
        }
        let pred = match predict_distribution(&model.model, wave, passes, seed) {
            Ok(p) => p,
            Err(e) => return from_model_error(e),
        };
        std::slice::from_raw_parts_mut(m_hat, t).copy_from_slice(&pred.m_hat);
        if !s_hat.is_null() {
            let out = std::slice::from_raw_parts_mut(s_hat, t);
            match &pred.s_hat {
                Some(s) => out.copy_from_slice(s),
                None => out.fill(f64::NAN),
            }
        }
        AbnStatus::Ok
    })
}

/// Concordance correlation coefficient of two length-`n` series.
///
/// # Safety
/// `x` and `y` must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_ccc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AbnStatus {
    guard(|| {
        let x = require!(slice(x, n), "x");
        let y = require!(slice(y, n), "y");
        let out = require!(out.as_mut(), "out");
        match losses::ccc(x, y) {
            Ok(v) => {
                *out = v;
                AbnStatus::Ok
            }
            Err(e) => from_metric_error(e),
        }
    })
}

/// KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)).
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_gaussian_kl(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64, out: *mut f64) -> AbnStatus {
    guard(|| {
        let out = require!(out.as_mut(), "out");
        match losses::gaussian_kl(mu_p, sigma_p, mu_q, sigma_q) {
            Ok(v) => {
                *out = v;
                AbnStatus::Ok
            }
            Err(e) => from_metric_error(e),
        }
    })
}

/// Mean per-frame KL from the label distribution `(m, s)` to the
/// prediction `(m_hat, s_hat)`, with both spreads floored.
///
/// # Safety
/// The four inputs must be valid for `n` reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn abn_kl_metric(
    m: *const f64,
    s: *const f64,
    m_hat: *const f64,
    s_hat: *const f64,
    n: usize,
    out: *mut f64,
) -> AbnStatus {
    guard(|| {
        let m = require!(slice(m, n), "m");
        let s = require!(slice(s, n), "s");
        let m_hat = require!(slice(m_hat, n), "m_hat");
        let s_hat = require!(slice(s_hat, n), "s_hat");
        let out = require!(out.as_mut(), "out");
        match losses::kl_metric(m, s, m_hat, s_hat) {
            Ok(v) => {
                *out = v;
                AbnStatus::Ok
            }
            Err(e) => from_metric_error(e),
        }
    })
}

/// Centered running median, window truncated at the edges; `out` receives `n`
/// values and may not alias `seq`.
///
/// # Safety
/// `seq` must be valid for `n` reads and `out` for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn abn_median_filter(seq: *const f64, n: usize, window: usize, out: *mut f64) -> AbnStatus {
    guard(|| {
        let seq = require!(slice(seq, n), "seq");
        if out.is_null() {
            return fail(AbnStatus::NullPointer, "out is null");
        }
        match losses::median_filter(seq, window) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, n).copy_from_slice(&v);
                AbnStatus::Ok
            }
            Err(e) => from_metric_error(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_arguments_are_reported() {
        let mut out = 0.0;
        let status = unsafe { abn_ccc(std::ptr::null(), [1.0].as_ptr(), 1, &mut out) };
        assert_eq!(status, AbnStatus::NullPointer);
        let mut buf = [0 as c_char; 64];
        let len = unsafe { abn_last_error(buf.as_mut_ptr(), buf.len()) };
        let msg = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
        assert_eq!((msg, len), ("x is null", 9));
    }

    #[test]
    fn error_messages_truncate_safely() {
        let mut out = 0.0;
        unsafe { abn_gaussian_kl(0.0, -1.0, 0.0, 1.0, &mut out) };
        let mut buf = [1 as c_char; 5];
        let len = unsafe { abn_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(len > 4);
        assert_eq!(buf[4], 0);
    }
}
