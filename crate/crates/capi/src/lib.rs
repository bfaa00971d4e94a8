//! C ABI over the super-resolution core: checkpoint loading, 2x/4x
//! inference on raw RGB buffers, and the PSNR/SSIM metrics.
//!
//! Conventions: images are row-major interleaved RGB f64 in [0, 1]
//! (`height * width * 3` values). Models are opaque handles created by
//! [`psr_model_load`] and released with [`psr_model_free`]. Functions
//! return [`PsrStatus`]; on failure a thread-local message is available
//! through [`psr_last_error`] until the next failing call on the same
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use patchsr::checkpoint::Checkpoint;
use patchsr::config::TrainConfig;
use patchsr::error::Error;
use patchsr::generator::GeneratorParams;
use patchsr::image::ImageTensor;
use patchsr::metrics::{psnr_capped, ssim};
use patchsr::params::load_named;
use patchsr::tensor::Tensor;

/// Opaque handle to a loaded generator.
pub struct PsrModel {
    cfg: TrainConfig,
    gen: GeneratorParams,
}

/// Result codes of every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidArgument = 4,
    Geometry = 5,
    Numeric = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn fail(status: PsrStatus, message: String) -> PsrStatus {
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = cstring);
    status
}

fn fail_error(e: Error) -> PsrStatus {
    let status = match &e {
        Error::Config(_) => PsrStatus::InvalidArgument,
        Error::Geometry(_) => PsrStatus::Geometry,
        Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => PsrStatus::Io,
        Error::Numeric(_) => PsrStatus::Numeric,
    };
    fail(status, e.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn psr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn psr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a training checkpoint and build its generator.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with [`psr_model_free`].
#[no_mangle]
pub unsafe extern "C" fn psr_model_load(path: *const c_char, out: *mut *mut PsrModel) -> PsrStatus {
    if path.is_null() || out.is_null() {
        return fail(PsrStatus::NullArgument, "null path or out pointer".into());
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(PsrStatus::InvalidUtf8, "path is not valid UTF-8".into());
    };
    let ck = match Checkpoint::load(Path::new(path)) {
        Ok(ck) => ck,
        Err(e) => return fail_error(e),
    };
    let cfg = match ck.config() {
        Ok(cfg) => cfg,
        Err(e) => return fail_error(e),
    };
    let crop = cfg.resolved_crop();
    let mut gen = match GeneratorParams::init(crop, crop, cfg.k, cfg.transformer_config(), cfg.seed)
    {
        Ok(g) => g,
        Err(e) => return fail_error(e),
    };
    if let Err(e) = load_named(&mut gen, &ck.gen) {
        return fail_error(e);
    }
    *out = Box::into_raw(Box::new(PsrModel { cfg, gen }));
    PsrStatus::Ok
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must have come from [`psr_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn psr_model_free(model: *mut PsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Patch size the model was trained with; input sides must divide by
/// twice this value.
///
/// # Safety
/// `model` must be a live handle from [`psr_model_load`].
#[no_mangle]
pub unsafe extern "C" fn psr_model_patch_size(model: *const PsrModel) -> u32 {
    if model.is_null() {
        return 0;
    }
    (*model).cfg.k as u32
}

unsafe fn image_from_raw(ptr: *const f64, width: u32, height: u32) -> Result<ImageTensor, Error> {
    let len = height as usize * width as usize * 3;
    let data = std::slice::from_raw_parts(ptr, len).to_vec();
    ImageTensor::from_tensor(Tensor::new(vec![height as usize, width as usize, 3], data))
}

/// Super-resolve an RGB image by `scale` (2 or 4). `input` holds
/// `height * width * 3` values; `output` must have room for
/// `scale^2 * height * width * 3` values.
///
/// # Safety
/// `model` must be live; `input`/`output` must point to buffers of the
/// stated sizes.
#[no_mangle]
pub unsafe extern "C" fn psr_super_resolve(
    model: *const PsrModel,
    input: *const f64,
    width: u32,
    height: u32,
    scale: u32,
    output: *mut f64,
) -> PsrStatus {
    if model.is_null() || input.is_null() || output.is_null() {
        return fail(PsrStatus::NullArgument, "null model or buffer".into());
    }
    if width == 0 || height == 0 {
        return fail(PsrStatus::Geometry, "empty input image".into());
    }
    if scale != 2 && scale != 4 {
        return fail(
            PsrStatus::InvalidArgument,
            format!("scale must be 2 or 4, got {scale}"),
        );
    }
    let image = match image_from_raw(input, width, height) {
        Ok(img) => img,
        Err(e) => return fail_error(e),
    };
    let model = &*model;
    let result = match scale {
        2 => model.gen.forward_2x(&image),
        _ => model.gen.forward_4x(&image),
    };
    match result {
        Ok(sr) => {
            let out_len = sr.height() * sr.width() * 3;
            let out = std::slice::from_raw_parts_mut(output, out_len);
            out.copy_from_slice(sr.tensor().data());
            PsrStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// PSNR in dB between two same-sized RGB images (peak 1.0, identical
/// images report the 100 dB cap).
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn psr_psnr(
    a: *const f64,
    b: *const f64,
    width: u32,
    height: u32,
    out: *mut f64,
) -> PsrStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(PsrStatus::NullArgument, "null buffer".into());
    }
    let (ia, ib) = match (image_from_raw(a, width, height), image_from_raw(b, width, height)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return fail_error(e),
    };
    match psnr_capped(&ia, &ib, 1.0) {
        Ok(v) => {
            *out = v;
            PsrStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Mean SSIM between two same-sized RGB images (11x11 Gaussian window);
/// sides must be at least 11 pixels.
///
/// # Safety
/// `a` and `b` must hold `height * width * 3` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn psr_ssim(
    a: *const f64,
    b: *const f64,
    width: u32,
    height: u32,
    out: *mut f64,
) -> PsrStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(PsrStatus::NullArgument, "null buffer".into());
    }
    let (ia, ib) = match (image_from_raw(a, width, height), image_from_raw(b, width, height)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return fail_error(e),
    };
    match ssim(&ia, &ib) {
        Ok(v) => {
            *out = v;
            PsrStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}
