use std::f64::consts::PI;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use deblur_core::fft::circular_convolve;
use deblur_core::kernel::BlurKernel;
use deblur_core::tensor::Tensor;
use deblur_core::trainer::{Model, TrainConfig};
use deblur_ffi::*;

const SIZE: usize = 8;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        image_size: SIZE,
        channels: vec![3],
        latent_dim: 2,
        hidden: 6,
        g_hidden: 5,
        kernel_size: 3,
        batch_size: 4,
        seed: 3,
        ..Default::default()
    }
}

fn ramp(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (0.37 * i as f64 + phase).sin() * 0.9).collect()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> Option<String> {
    let p = deblur_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

struct Handle(*mut DeblurModel);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { deblur_model_free(self.0) };
    }
}

fn load(path: &Path) -> Handle {
    let mut m = ptr::null_mut();
    let s = unsafe { deblur_model_load(c_path(path).as_ptr(), &mut m) };
    assert_eq!(s, DeblurStatus::Ok, "{:?}", last_error());
    assert!(!m.is_null());
    Handle(m)
}

fn saved_model(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("m.dbve");
    Model::new(&tiny_config(), 1).unwrap().save(&path).unwrap();
    path
}

#[test]
fn dims_and_reconstruction_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(dir.path());
    let h = load(&path);

    let (mut size, mut ch, mut lat, mut ks) = (0, 0, 0, 0);
    let s = unsafe { deblur_model_dims(h.0, &mut size, &mut ch, &mut lat, &mut ks) };
    assert_eq!(s, DeblurStatus::Ok);
    assert_eq!((size, ch, lat, ks), (SIZE, 1, 2, 3));
    // every output is optional
    let s = unsafe { deblur_model_dims(h.0, ptr::null_mut(), ptr::null_mut(), &mut lat, ptr::null_mut()) };
    assert_eq!(s, DeblurStatus::Ok);

    let n = 2;
    let x = ramp(n * SIZE * SIZE, 0.3);
    let mut out = vec![0.0; x.len()];
    let s = unsafe { deblur_model_reconstruct(h.0, x.as_ptr(), n, out.as_mut_ptr()) };
    assert_eq!(s, DeblurStatus::Ok);

    let mut lib = Model::load(&path).unwrap();
    let want = lib
        .vae
        .reconstruct(&Tensor::new(vec![n, 1, SIZE, SIZE], x.clone()).unwrap())
        .unwrap();
    assert_eq!(out, want.data());
    assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let h = load(&saved_model(dir.path()));
    let n = 3;
    let draw = |seed| {
        let mut out = vec![f64::NAN; n * SIZE * SIZE];
        let s = unsafe { deblur_model_generate(h.0, n, seed, out.as_mut_ptr()) };
        assert_eq!(s, DeblurStatus::Ok);
        out
    };
    let a = draw(7);
    assert_eq!(a, draw(7));
    assert_ne!(a, draw(8));
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn estimated_kernels_are_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let h = load(&saved_model(dir.path()));
    let n = 2;
    let x = ramp(n * SIZE * SIZE, 1.1);
    let mut out = vec![0.0; n * 9];
    let s = unsafe { deblur_model_estimate_kernels(h.0, x.as_ptr(), n, out.as_mut_ptr()) };
    assert_eq!(s, DeblurStatus::Ok);
    for k in out.chunks(9) {
        assert!(k.iter().all(|&v| v >= 0.0));
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn load_failures_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ptr::null_mut();

    let missing = c_path(&dir.path().join("absent.dbve"));
    assert_eq!(unsafe { deblur_model_load(missing.as_ptr(), &mut m) }, DeblurStatus::Io);
    assert!(m.is_null());
    assert!(last_error().is_some());

    let junk = dir.path().join("junk.dbve");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        unsafe { deblur_model_load(c_path(&junk).as_ptr(), &mut m) },
        DeblurStatus::Format
    );

    assert_eq!(
        unsafe { deblur_model_load(ptr::null(), &mut m) },
        DeblurStatus::NullPointer
    );
    assert!(last_error().unwrap().contains("path"));
    assert_eq!(
        unsafe { deblur_model_load(missing.as_ptr(), ptr::null_mut()) },
        DeblurStatus::NullPointer
    );
}

#[test]
fn null_handles_are_rejected_and_free_tolerates_null() {
    let mut out = [0.0; 64];
    let s = unsafe { deblur_model_generate(ptr::null_mut(), 1, 0, out.as_mut_ptr()) };
    assert_eq!(s, DeblurStatus::NullPointer);
    assert!(last_error().unwrap().contains("model"));
    unsafe { deblur_model_free(ptr::null_mut()) };
}

#[test]
fn success_clears_the_last_error() {
    let mut v = 0.0;
    assert_eq!(
        unsafe { deblur_bccb_logdet(ptr::null(), 3, 4, 4, 0.1, &mut v) },
        DeblurStatus::NullPointer
    );
    assert!(last_error().is_some());
    let k = [1.0];
    assert_eq!(
        unsafe { deblur_bccb_logdet(k.as_ptr(), 1, 4, 4, 0.0, &mut v) },
        DeblurStatus::Ok
    );
    assert!(last_error().is_none());
}

/// `Σ ln|λ(u,v) + ε|` with every eigenvalue summed straight from the DFT definition.
fn direct_logdet(k: &[f64], size: usize, h: usize, w: usize, eps: f64) -> f64 {
    let c = (size / 2) as f64;
    let mut total = 0.0;
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (eps, 0.0);
            for a in 0..size {
                for b in 0..size {
                    let t = -2.0 * PI * (u as f64 * (a as f64 - c) / h as f64 + v as f64 * (b as f64 - c) / w as f64);
                    re += k[a * size + b] * t.cos();
                    im += k[a * size + b] * t.sin();
                }
            }
            total += 0.5 * (re * re + im * im).ln();
        }
    }
    total
}

#[test]
fn logdet_matches_direct_eigenvalues() {
    // this ramp kernel has an exact spectral zero on the 6×6 grid, hence ε > 0 there
    let k: Vec<f64> = (0..9).map(|i| 0.05 + 0.02 * i as f64).collect();
    for (h, w, eps) in [(4, 4, 0.1), (8, 4, 0.5), (6, 6, 0.05)] {
        let mut got = 0.0;
        let s = unsafe { deblur_bccb_logdet(k.as_ptr(), 3, h, w, eps, &mut got) };
        assert_eq!(s, DeblurStatus::Ok, "{:?}", last_error());
        let want = direct_logdet(&k, 3, h, w, eps);
        assert!(
            (got - want).abs() < 1e-10 * want.abs().max(1.0),
            "{h}x{w}: {got} vs {want}"
        );
    }
}

#[test]
fn weighted_error_of_identity_kernel_is_scaled_squared_error() {
    let (h, w) = (4, 8);
    let x = ramp(h * w, 0.0);
    let y = ramp(h * w, 0.4);
    let c = 0.25;
    let mut got = 0.0;
    let one = [1.0];
    let s = unsafe { deblur_weighted_error(x.as_ptr(), y.as_ptr(), h, w, one.as_ptr(), 1, c, &mut got) };
    assert_eq!(s, DeblurStatus::Ok);
    // W ≡ 1/(1+C), and Parseval turns the spectral sum back into pixels
    let sq: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
    assert!((got - sq / (1.0 + c).powi(2)).abs() < 1e-12 * sq);

    let s = unsafe { deblur_weighted_error(x.as_ptr(), x.as_ptr(), h, w, one.as_ptr(), 1, c, &mut got) };
    assert_eq!(s, DeblurStatus::Ok);
    assert_eq!(got, 0.0);

    let s = unsafe { deblur_weighted_error(x.as_ptr(), y.as_ptr(), h, w, one.as_ptr(), 1, 0.0, &mut got) };
    assert_eq!(s, DeblurStatus::InvalidArgument);
}

#[test]
fn fit_kernel_recovers_a_known_blur() {
    let (h, w) = (16, 16);
    let x: Vec<f64> = (0..h * w).map(|i| ((i * 7919) % 251) as f64 / 125.0 - 1.0).collect();
    let truth = BlurKernel::normalized(3, vec![1.0, 2.0, 0.5, 3.0, 4.0, 1.0, 0.2, 0.7, 1.5]).unwrap();
    let y = circular_convolve(&x, &truth, h, w).unwrap();
    let mut k = [0.0; 9];
    let s = unsafe { deblur_fit_kernel(x.as_ptr(), y.as_ptr(), h, w, 3, 0.0, k.as_mut_ptr()) };
    assert_eq!(s, DeblurStatus::Ok, "{:?}", last_error());
    for (a, b) in k.iter().zip(truth.weights()) {
        assert!((a - b).abs() < 1e-9);
    }
    let s = unsafe { deblur_fit_kernel(x.as_ptr(), y.as_ptr(), h, w, 4, 0.0, k.as_mut_ptr()) };
    assert_ne!(s, DeblurStatus::Ok);
}

#[test]
fn quality_of_known_offsets() {
    let (h, w) = (8, 8);
    let x = ramp(h * w, 0.2);
    let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    let (mut p, mut s) = (0.0, 0.0);
    assert_eq!(
        unsafe { deblur_quality(x.as_ptr(), y.as_ptr(), h, w, &mut p, &mut s) },
        DeblurStatus::Ok
    );
    assert!((p - 10.0 * (4.0f64 / 0.01).log10()).abs() < 1e-9);
    assert!(s < 1.0 && s > 0.9);
    assert_eq!(
        unsafe { deblur_quality(x.as_ptr(), x.as_ptr(), h, w, &mut p, ptr::null_mut()) },
        DeblurStatus::Ok
    );
    assert_eq!(p, f64::INFINITY);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/deblur.h")).unwrap();
    for name in [
        "deblur_last_error",
        "deblur_model_load",
        "deblur_model_free",
        "deblur_model_dims",
        "deblur_model_reconstruct",
        "deblur_model_generate",
        "deblur_model_estimate_kernels",
        "deblur_weighted_error",
        "deblur_bccb_logdet",
        "deblur_fit_kernel",
        "deblur_quality",
        "DEBLUR_STATUS_SINGULAR",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    assert!(header.contains("typedef struct DeblurModel DeblurModel") || header.contains("struct DeblurModel;"));
}
