//! C ABI over `nima-core`.
//!
//! Every fallible entry point returns a [`NimaStatus`]; on failure a
//! description is kept per thread and read back with
//! [`nima_last_error_message`]. Models are opaque [`NimaModel`] handles
//! owned by the caller between `nima_model_load` and `nima_model_free`.
//! Distributions cross the boundary as `double` arrays of bucket
//! probabilities.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nima_core::dist::{self, Logits};
use nima_core::image::ImageTensor;
use nima_core::maxent::{fit_maxent_default, MomentTarget};
use nima_core::metrics;
use nima_core::model::{predict, Checkpoint, ModelParams};
use nima_core::{BucketScale, Error, ErrorCategory, ScoreDistribution};

/// Status codes; the nonzero values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NimaStatus {
    Ok = 0,
    /// Bad argument or null pointer.
    Usage = 1,
    /// Malformed or inconsistent input data.
    Data = 2,
    /// Numerical failure (non-convergence, degenerate input).
    Numerical = 3,
    /// A Rust panic was caught at the boundary.
    Internal = 4,
}

/// Opaque trained model.
pub struct NimaModel {
    params: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> NimaStatus {
    let status = match e.category() {
        ErrorCategory::Usage => NimaStatus::Usage,
        ErrorCategory::Data => NimaStatus::Data,
        ErrorCategory::Numerical => NimaStatus::Numerical,
    };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> Result<(), Error>) -> NimaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NimaStatus::Ok,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic".into());
            NimaStatus::Internal
        }
    }
}

fn null(name: &str) -> Error {
    Error::InvalidArgument(format!("{name} is null"))
}

unsafe fn input<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Error> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a>(p: *mut f64, n: usize, name: &str) -> Result<&'a mut [f64], Error> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn write(p: *mut f64, v: f64, name: &str) -> Result<(), Error> {
    if p.is_null() {
        return Err(null(name));
    }
    *p = v;
    Ok(())
}

fn index_scale(n: usize) -> Result<BucketScale, Error> {
    let hi = i32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} buckets")))?;
    BucketScale::integer_range(1, hi)
}

unsafe fn distribution(p: *const f64, n: usize, name: &str) -> Result<ScoreDistribution, Error> {
    ScoreDistribution::new(index_scale(n)?, input(p, n, name)?.to_vec())
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nima_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nima_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn nima_model_load(path: *const c_char, out: *mut *mut NimaModel) -> NimaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let ckpt = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(NimaModel { params: ckpt.params }));
        Ok(())
    })
}

/// Releases a handle from `nima_model_load`; NULL is ignored.
///
/// # Safety
/// `model` must come from `nima_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nima_model_free(model: *mut NimaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of score buckets the model predicts, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nima_model_num_buckets(model: *const NimaModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.scale.len())
}

/// Bucket values of the model's scale, written to `out_values[0..len]`.
///
/// # Safety
/// `out_values` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nima_model_bucket_values(model: *const NimaModel, out_values: *mut f64, len: usize) -> NimaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let values = m.params.scale.values();
        if len != values.len() {
            return Err(Error::LengthMismatch { expected: values.len(), got: len });
        }
        output(out_values, len, "out_values")?.copy_from_slice(values);
        Ok(())
    })
}

/// Predicts the score distribution of an interleaved `height × width ×
/// channels` image with values in [0, 1]. `out_probs` receives
/// `num_buckets` probabilities; `out_mean` / `out_std` may be NULL.
///
/// # Safety
/// `pixels` must hold `height * width * channels` doubles and `out_probs`
/// `num_buckets` doubles.
#[no_mangle]
pub unsafe extern "C" fn nima_model_predict(
    model: *const NimaModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    out_probs: *mut f64,
    num_buckets: usize,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> NimaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let len = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("image size overflows".into()))?;
        let img = ImageTensor::new(height, width, channels, input(pixels, len, "pixels")?.to_vec())?;
        let d = predict(&img, &m.params)?;
        if num_buckets != d.len() {
            return Err(Error::LengthMismatch { expected: d.len(), got: num_buckets });
        }
        output(out_probs, num_buckets, "out_probs")?.copy_from_slice(d.mass());
        if !out_mean.is_null() {
            *out_mean = d.mean();
        }
        if !out_std.is_null() {
            *out_std = d.std_dev();
        }
        Ok(())
    })
}

/// Normalized EMD with exponent `r` between two `n`-bucket distributions.
///
/// # Safety
/// `p` and `q` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nima_emd(p: *const f64, q: *const f64, n: usize, r: f64, out: *mut f64) -> NimaStatus {
    guard(|| {
        let v = dist::emd(&distribution(p, n, "p")?, &distribution(q, n, "q")?, r)?;
        write(out, v, "out")
    })
}

/// Squared-EMD (r = 2) loss of `softmax(logits)` against `target`.
///
/// # Safety
/// `target` and `logits` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nima_squared_emd_loss(
    target: *const f64,
    logits: *const f64,
    n: usize,
    out: *mut f64,
) -> NimaStatus {
    guard(|| {
        let p = distribution(target, n, "target")?;
        let z = Logits(input(logits, n, "logits")?.to_vec());
        write(out, dist::squared_emd_loss(&p, &z)?, "out")
    })
}

/// Gradient of the squared-EMD loss with respect to the logits.
///
/// # Safety
/// `target`, `logits` and `out_grad` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nima_squared_emd_grad(
    target: *const f64,
    logits: *const f64,
    n: usize,
    out_grad: *mut f64,
) -> NimaStatus {
    guard(|| {
        let p = distribution(target, n, "target")?;
        let z = Logits(input(logits, n, "logits")?.to_vec());
        let g = dist::squared_emd_grad(&p, &z)?;
        output(out_grad, n, "out_grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Maximum-entropy distribution on the scale `values[0..n]` with mean `mu`
/// and standard deviation `sigma`.
///
/// # Safety
/// `values` and `out_probs` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nima_fit_maxent(
    mu: f64,
    sigma: f64,
    values: *const f64,
    n: usize,
    out_probs: *mut f64,
) -> NimaStatus {
    guard(|| {
        let scale = BucketScale::new(input(values, n, "values")?.to_vec())?;
        let sol = fit_maxent_default(&MomentTarget::new(mu, sigma, scale))?;
        output(out_probs, n, "out_probs")?.copy_from_slice(sol.dist.mass());
        Ok(())
    })
}

/// Pearson correlation of `x[0..n]` and `y[0..n]`.
///
/// # Safety
/// `x` and `y` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nima_lcc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> NimaStatus {
    guard(|| write(out, metrics::lcc(input(x, n, "x")?, input(y, n, "y")?)?, "out"))
}

/// Spearman correlation with average ranks for ties.
///
/// # Safety
/// `x` and `y` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nima_srcc(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> NimaStatus {
    guard(|| write(out, metrics::srcc(input(x, n, "x")?, input(y, n, "y")?)?, "out"))
}
