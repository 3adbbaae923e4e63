//! C ABI over `deblur-core`.
//!
//! Every fallible function returns a [`DeblurStatus`]; on failure the message
//! is retrievable on the same thread through [`deblur_last_error`]. Models are
//! opaque handles released with [`deblur_model_free`]. Images are row-major
//! `f64` planes in `[-1, 1]`, batches laid out `[n, channels, size, size]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use deblur_core::circulant::BccbOperator;
use deblur_core::kernel::BlurKernel;
use deblur_core::kernel_estimator::fit_kernel_least_squares;
use deblur_core::metrics;
use deblur_core::tensor::Tensor;
use deblur_core::trainer::{rng_stream, Model};
use deblur_core::wiener_loss::{build_weight, weighted_error};
use deblur_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeblurStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Singular = 4,
    Divergence = 5,
    Io = 6,
    Format = 7,
    Panic = 8,
}

/// A loaded VAE with its kernel generator.
pub struct DeblurModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // interior NULs cannot cross the C boundary
    let msg = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> DeblurStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::NotPowerOfTwo { .. } => DeblurStatus::ShapeMismatch,
        Error::Singular(_) => DeblurStatus::Singular,
        Error::Divergence(_) => DeblurStatus::Divergence,
        Error::Io(_) => DeblurStatus::Io,
        Error::Format { .. } => DeblurStatus::Format,
        _ => DeblurStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> DeblurStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DeblurStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DeblurStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DeblurStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn input<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, n) })
}

/// # Safety
/// `p` must be null or valid for `n` writes.
unsafe fn output<'a>(p: *mut f64, n: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { slice::from_raw_parts_mut(p, n) })
}

fn checked_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Failure::Core(Error::InvalidArgument("size overflow".into())))
}

/// Message for the last failed call on this thread, or null after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn deblur_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_load(path: *const c_char, out: *mut *mut DeblurModel) -> DeblurStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let inner = Model::load(Path::new(p))?;
        unsafe { *out = Box::into_raw(Box::new(DeblurModel { inner })) };
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`deblur_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_free(model: *mut DeblurModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Image side, channel count, latent size and kernel size of a model.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_dims(
    model: *const DeblurModel,
    image_size: *mut usize,
    channels: *mut usize,
    latent_dim: *mut usize,
    kernel_size: *mut usize,
) -> DeblurStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or(Failure::Null("model"))?;
        let c = m.inner.vae.config();
        for (p, v) in [
            (image_size, c.image_size),
            (channels, c.in_channels),
            (latent_dim, c.latent_dim),
            (kernel_size, m.inner.generator.size()),
        ] {
            if !p.is_null() {
                unsafe { *p = v };
            }
        }
        Ok(())
    })
}

fn batch_dims(m: &DeblurModel, n: usize) -> Result<[usize; 4], Failure> {
    let c = m.inner.vae.config();
    let dims = [n, c.in_channels, c.image_size, c.image_size];
    checked_len(&dims)?;
    Ok(dims)
}

/// Posterior-mean reconstructions of `n` images.
///
/// # Safety
/// `x` and `out` must each hold `n · channels · size²` values.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_reconstruct(
    model: *mut DeblurModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }.ok_or(Failure::Null("model"))?;
        let dims = batch_dims(m, n)?;
        let len = checked_len(&dims)?;
        let xs = unsafe { input(x, len, "x") }?;
        let dst = unsafe { output(out, len, "out") }?;
        let t = Tensor::new(dims.to_vec(), xs.to_vec())?;
        dst.copy_from_slice(m.inner.vae.reconstruct(&t)?.data());
        Ok(())
    })
}

/// Decodes `n` prior samples drawn from a stream seeded by `seed`.
///
/// # Safety
/// `out` must hold `n · channels · size²` values.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_generate(
    model: *mut DeblurModel,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }.ok_or(Failure::Null("model"))?;
        let len = checked_len(&batch_dims(m, n)?)?;
        let dst = unsafe { output(out, len, "out") }?;
        let imgs = m.inner.vae.generate(n, &mut rng_stream(seed, 0))?;
        dst.copy_from_slice(imgs.data());
        Ok(())
    })
}

/// Generator kernels (unit-sum, `kernel_size²` each) at the posterior means of `n` images.
///
/// # Safety
/// `x` must hold `n · channels · size²` values and `out` `n · kernel_size²`.
#[no_mangle]
pub unsafe extern "C" fn deblur_model_estimate_kernels(
    model: *mut DeblurModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }.ok_or(Failure::Null("model"))?;
        let dims = batch_dims(m, n)?;
        let len = checked_len(&dims)?;
        let k2 = m.inner.generator.size().pow(2);
        let xs = unsafe { input(x, len, "x") }?;
        let dst = unsafe { output(out, checked_len(&[n, k2])?, "out") }?;
        let ks = m.inner.estimated_kernels(&Tensor::new(dims.to_vec(), xs.to_vec())?)?;
        for (chunk, k) in dst.chunks_mut(k2).zip(&ks) {
            chunk.copy_from_slice(k.weights());
        }
        Ok(())
    })
}

/// Wiener-weighted squared error of one `height × width` plane pair under a
/// unit-sum kernel of odd side `kernel_size`.
///
/// # Safety
/// `x`, `xhat` hold `height · width` values, `kernel` `kernel_size²`, `out` one.
#[no_mangle]
pub unsafe extern "C" fn deblur_weighted_error(
    x: *const f64,
    xhat: *const f64,
    height: usize,
    width: usize,
    kernel: *const f64,
    kernel_size: usize,
    c: f64,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let plane = checked_len(&[height, width])?;
        let xs = unsafe { input(x, plane, "x") }?;
        let xh = unsafe { input(xhat, plane, "xhat") }?;
        let kw = unsafe { input(kernel, checked_len(&[kernel_size, kernel_size])?, "kernel") }?;
        let dst = unsafe { output(out, 1, "out") }?;
        let k = BlurKernel::normalized(kernel_size, kw.to_vec())?;
        let w = build_weight(&k, c, height, width)?;
        dst[0] = weighted_error(xs, xh, &w)?;
        Ok(())
    })
}

/// `log|det(K + εI)|` for the block-circulant operator of a raw kernel.
///
/// # Safety
/// `kernel` holds `kernel_size²` values and `out` one.
#[no_mangle]
pub unsafe extern "C" fn deblur_bccb_logdet(
    kernel: *const f64,
    kernel_size: usize,
    height: usize,
    width: usize,
    epsilon: f64,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let kw = unsafe { input(kernel, checked_len(&[kernel_size, kernel_size])?, "kernel") }?;
        let dst = unsafe { output(out, 1, "out") }?;
        let k = BlurKernel::from_raw(kernel_size, kw.to_vec())?;
        dst[0] = BccbOperator::new(k, height, width, epsilon)?.log_abs_det()?;
        Ok(())
    })
}

/// Least-squares kernel with `x ⊛ k ≈ xhat` (raw weights, not normalized).
///
/// # Safety
/// `x`, `xhat` hold `height · width` values and `out` `kernel_size²`.
#[no_mangle]
pub unsafe extern "C" fn deblur_fit_kernel(
    x: *const f64,
    xhat: *const f64,
    height: usize,
    width: usize,
    kernel_size: usize,
    ridge: f64,
    out: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let plane = checked_len(&[height, width])?;
        let xs = unsafe { input(x, plane, "x") }?;
        let xh = unsafe { input(xhat, plane, "xhat") }?;
        let dst = unsafe { output(out, checked_len(&[kernel_size, kernel_size])?, "out") }?;
        let k = fit_kernel_least_squares(xs, xh, height, width, kernel_size, ridge)?;
        dst.copy_from_slice(k.weights());
        Ok(())
    })
}

/// PSNR and SSIM of one plane pair in `[-1, 1]`; either output may be null.
///
/// # Safety
/// `x`, `y` hold `height · width` values.
#[no_mangle]
pub unsafe extern "C" fn deblur_quality(
    x: *const f64,
    y: *const f64,
    height: usize,
    width: usize,
    psnr: *mut f64,
    ssim: *mut f64,
) -> DeblurStatus {
    guard(|| {
        let plane = checked_len(&[height, width])?;
        let xs = unsafe { input(x, plane, "x") }?;
        let ys = unsafe { input(y, plane, "y") }?;
        if !psnr.is_null() {
            unsafe { *psnr = metrics::psnr(xs, ys, metrics::SIGNED_RANGE)? };
        }
        if !ssim.is_null() {
            unsafe { *ssim = metrics::ssim(xs, ys, height, width)? };
        }
        Ok(())
    })
}
