//! Exercises the C ABI exactly as a foreign caller would: through raw
//! pointers and status codes, against a checkpoint produced by the core
//! crate.

use std::ffi::{CStr, CString};
use std::path::PathBuf;

use patchsr::config::TrainConfig;
use patchsr::image::{random_image, ImageTensor};
use patchsr::rng::rng_from_seed;
use patchsr::training::TrainState;

use patchsr_capi::{
    psr_last_error, psr_model_free, psr_model_load, psr_model_patch_size, psr_psnr, psr_ssim,
    psr_super_resolve, psr_version, PsrModel, PsrStatus,
};

fn tiny_checkpoint(dir: &std::path::Path) -> PathBuf {
    let cfg = TrainConfig {
        scale: 2,
        crop_lr: 8,
        k: 2,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        batch_size: 1,
        disc_dim: 8,
        seed: 31,
        ..TrainConfig::default()
    };
    let state = TrainState::new(cfg).unwrap();
    let path = dir.join("model.ckpt");
    state.to_checkpoint().save(&path).unwrap();
    path
}

fn load(path: &std::path::Path) -> *mut PsrModel {
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut PsrModel = std::ptr::null_mut();
    let status = unsafe { psr_model_load(cpath.as_ptr(), &mut handle) };
    assert_eq!(status, PsrStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(psr_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(psr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn load_infer_matches_core_forward() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let model = load(&ckpt);
    assert_eq!(unsafe { psr_model_patch_size(model) }, 2);

    let mut rng = rng_from_seed(77);
    let img = random_image(&mut rng, 8, 8, 3);
    let mut out = vec![0.0f64; 16 * 16 * 3];
    let status = unsafe {
        psr_super_resolve(model, img.tensor().data().as_ptr(), 8, 8, 2, out.as_mut_ptr())
    };
    assert_eq!(status, PsrStatus::Ok, "{}", last_error());

    // The ABI path must agree exactly with the library path.
    let ck = patchsr::checkpoint::Checkpoint::load(&ckpt).unwrap();
    let cfg = ck.config().unwrap();
    let crop = cfg.resolved_crop();
    let mut gen = patchsr::generator::GeneratorParams::init(
        crop,
        crop,
        cfg.k,
        cfg.transformer_config(),
        cfg.seed,
    )
    .unwrap();
    patchsr::params::load_named(&mut gen, &ck.gen).unwrap();
    let expect = gen.forward_2x(&img).unwrap();
    assert_eq!(out, expect.tensor().data());

    // 4x through the same handle.
    let mut out4 = vec![0.0f64; 32 * 32 * 3];
    let status = unsafe {
        psr_super_resolve(model, img.tensor().data().as_ptr(), 8, 8, 4, out4.as_mut_ptr())
    };
    assert_eq!(status, PsrStatus::Ok);
    let expect4 = gen.forward_4x(&img).unwrap();
    assert_eq!(out4, expect4.tensor().data());

    unsafe { psr_model_free(model) };
}

#[test]
fn metrics_match_core_functions() {
    let mut rng = rng_from_seed(78);
    let a = random_image(&mut rng, 16, 16, 3);
    let b = random_image(&mut rng, 16, 16, 3);
    let mut psnr_out = 0.0f64;
    let status = unsafe {
        psr_psnr(
            a.tensor().data().as_ptr(),
            b.tensor().data().as_ptr(),
            16,
            16,
            &mut psnr_out,
        )
    };
    assert_eq!(status, PsrStatus::Ok);
    assert_eq!(psnr_out, patchsr::metrics::psnr_capped(&a, &b, 1.0).unwrap());

    let mut ssim_out = 0.0f64;
    let status = unsafe {
        psr_ssim(
            a.tensor().data().as_ptr(),
            b.tensor().data().as_ptr(),
            16,
            16,
            &mut ssim_out,
        )
    };
    assert_eq!(status, PsrStatus::Ok);
    assert_eq!(ssim_out, patchsr::metrics::ssim(&a, &b).unwrap());
}

#[test]
fn error_paths_set_status_and_message() {
    // Null arguments.
    let mut handle: *mut PsrModel = std::ptr::null_mut();
    let status = unsafe { psr_model_load(std::ptr::null(), &mut handle) };
    assert_eq!(status, PsrStatus::NullArgument);

    // Missing file.
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let status = unsafe { psr_model_load(missing.as_ptr(), &mut handle) };
    assert_eq!(status, PsrStatus::Io);
    assert!(last_error().contains("nonexistent"), "{}", last_error());

    // Invalid scale and geometry.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let model = load(&ckpt);
    let img = ImageTensor::constant(8, 8, 3, 0.5);
    let mut out = vec![0.0f64; 16 * 16 * 3];
    let status = unsafe {
        psr_super_resolve(model, img.tensor().data().as_ptr(), 8, 8, 3, out.as_mut_ptr())
    };
    assert_eq!(status, PsrStatus::InvalidArgument);
    assert!(last_error().contains("scale"), "{}", last_error());

    let odd = ImageTensor::constant(6, 6, 3, 0.5);
    let mut out_odd = vec![0.0f64; 12 * 12 * 3];
    let status = unsafe {
        psr_super_resolve(model, odd.tensor().data().as_ptr(), 6, 6, 2, out_odd.as_mut_ptr())
    };
    // 6 is not divisible by 2k = 4 for this k=2 model.
    assert_eq!(status, PsrStatus::Geometry, "{}", last_error());

    // SSIM below the window size.
    let small = ImageTensor::constant(8, 8, 3, 0.2);
    let mut v = 0.0f64;
    let status = unsafe {
        psr_ssim(
            small.tensor().data().as_ptr(),
            small.tensor().data().as_ptr(),
            8,
            8,
            &mut v,
        )
    };
    assert_eq!(status, PsrStatus::Geometry);

    unsafe { psr_model_free(model) };
    // Freeing null is a no-op.
    unsafe { psr_model_free(std::ptr::null_mut()) };
}

#[test]
fn generated_header_exists_and_declares_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("patchsr.h");
    let text = std::fs::read_to_string(&header).expect("header generated by build.rs");
    for symbol in [
        "psr_model_load",
        "psr_model_free",
        "psr_super_resolve",
        "psr_psnr",
        "psr_ssim",
        "psr_last_error",
        "psr_version",
        "PsrStatus",
        "PsrModel",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}:\n{text}");
    }
}
