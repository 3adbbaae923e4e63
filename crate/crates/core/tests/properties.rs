//! Randomized invariants of the numerical building blocks.

use proptest::collection::vec;
use proptest::prelude::*;

use deblur_core::circulant::BccbOperator;
use deblur_core::data_io::{decode_pgm, encode_pgm, split_indices};
use deblur_core::fft::{circular_convolve, fft2, ifft2, parseval_gap};
use deblur_core::kernel::BlurKernel;
use deblur_core::kernel_estimator::to_distribution;
use deblur_core::metrics::{psnr, ssim, SIGNED_RANGE};
use deblur_core::tensor::checkpoint::{read_records, write_records};
use deblur_core::tensor::Tensor;
use deblur_core::wiener_loss::{build_weight, kl_closed_form, weighted_error};

const SIDES: [usize; 3] = [4, 8, 16];

fn plane() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (0..3usize, 0..3usize).prop_flat_map(|(a, b)| {
        let (h, w) = (SIDES[a], SIDES[b]);
        vec(-1.0..1.0f64, h * w).prop_map(move |v| (h, w, v))
    })
}

fn plane_pair() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    plane().prop_flat_map(|(h, w, x)| vec(-1.0..1.0f64, h * w).prop_map(move |y| (h, w, x.clone(), y)))
}

fn kernel3() -> impl Strategy<Value = BlurKernel> {
    vec(0.01..1.0f64, 9).prop_map(|w| BlurKernel::normalized(3, w).unwrap())
}

/// `y[i,j] = Σ k[a,b]·x[i−(a−c), j−(b−c)]` with wrap-around indices.
fn direct_circular_conv(x: &[f64], k: &BlurKernel, h: usize, w: usize) -> Vec<f64> {
    let (s, c) = (k.size(), k.center() as isize);
    let mut y = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..s {
                for b in 0..s {
                    let ii = (i as isize - (a as isize - c)).rem_euclid(h as isize) as usize;
                    let jj = (j as isize - (b as isize - c)).rem_euclid(w as isize) as usize;
                    acc += k.at(a, b) * x[ii * w + jj];
                }
            }
            y[i * w + j] = acc;
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trips((h, w, x) in plane()) {
        let back = ifft2(&fft2(&x, h, w).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_is_linear((h, w, x, y) in plane_pair(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (fm, fx, fy) = (fft2(&mix, h, w).unwrap(), fft2(&x, h, w).unwrap(), fft2(&y, h, w).unwrap());
        for f in 0..fm.len() {
            prop_assert!((fm.re[f] - a * fx.re[f] - b * fy.re[f]).abs() < 1e-10);
            prop_assert!((fm.im[f] - a * fx.im[f] - b * fy.im[f]).abs() < 1e-10);
        }
    }

    #[test]
    fn real_input_has_hermitian_spectrum((h, w, x) in plane()) {
        prop_assert!(fft2(&x, h, w).unwrap().hermitian_defect() < 1e-12);
    }

    #[test]
    fn parseval_holds((h, w, x) in plane()) {
        prop_assert!(parseval_gap(&x, h, w).unwrap() < 1e-12);
    }

    #[test]
    fn convolution_theorem_matches_direct_sum((h, w, x) in plane(), k in kernel3()) {
        let fast = circular_convolve(&x, &k, h, w).unwrap();
        let slow = direct_circular_conv(&x, &k, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wiener_gain_is_bounded_by_quarter_inverse_c(k in kernel3(), c in 1e-4..1.0f64) {
        // |λ|²/(|λ|²+C)² peaks at |λ|² = C
        let g = build_weight(&k, c, 8, 8).unwrap().gain_squared();
        prop_assert!(g.iter().all(|&v| v >= 0.0 && v <= 1.0 / (4.0 * c) * (1.0 + 1e-12)));
    }

    #[test]
    fn weighted_error_is_a_nonnegative_quadratic((h, w, x, y) in plane_pair(), k in kernel3(), s in -2.0..2.0f64) {
        let wt = build_weight(&k, 0.05, h, w).unwrap();
        let e = weighted_error(&x, &y, &wt).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(weighted_error(&x, &x, &wt).unwrap(), 0.0);
        // scaling the residual by s scales the error by s²
        let ys: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * (b - a)).collect();
        let es = weighted_error(&x, &ys, &wt).unwrap();
        prop_assert!((es - s * s * e).abs() <= 1e-10 * (1.0 + e));
    }

    #[test]
    fn delta_operator_logdet_is_closed_form(eps in 0.0..2.0f64, a in 0..3usize, b in 0..3usize) {
        let (h, w) = (SIDES[a], SIDES[b]);
        let op = BccbOperator::new(BlurKernel::delta(3), h, w, eps).unwrap();
        let want = (h * w) as f64 * (1.0 + eps).ln();
        prop_assert!((op.log_abs_det().unwrap() - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn operator_apply_matches_direct_sum((h, w, x) in plane(), k in kernel3(), eps in 0.0..1.0f64) {
        let op = BccbOperator::new(k.clone(), h, w, eps).unwrap();
        let got = op.apply(&x).unwrap();
        let conv = direct_circular_conv(&x, &k, h, w);
        for ((g, c), xi) in got.iter().zip(&conv).zip(&x) {
            prop_assert!((g - c - eps * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_view_is_a_simplex_point(w in vec(-1.0..1.0f64, 25)) {
        prop_assume!(w.iter().any(|&v| v > 1e-6));
        let k = to_distribution(&BlurKernel::from_raw(5, w).unwrap()).unwrap();
        prop_assert!(k.weights().iter().all(|&v| v >= 0.0));
        prop_assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(k.second_moment().unwrap() <= 8.0 + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(mu in vec(-3.0..3.0f64, 1..12), seed in any::<u64>()) {
        let logvar: Vec<f64> = mu.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 7) as f64 / 2.0 - 2.0).collect();
        prop_assert!(kl_closed_form(&mu, &logvar) >= 0.0);
        let zeros = vec![0.0; mu.len()];
        prop_assert_eq!(kl_closed_form(&zeros, &zeros), 0.0);
    }

    #[test]
    fn quality_metrics_are_symmetric((h, w, x, y) in plane_pair()) {
        let p = psnr(&x, &y, SIGNED_RANGE).unwrap();
        prop_assert_eq!(p, psnr(&y, &x, SIGNED_RANGE).unwrap());
        if h < 8 || w < 8 {
            prop_assert!(ssim(&x, &y, h, w).is_err());
        } else {
            let s = ssim(&x, &y, h, w).unwrap();
            prop_assert!((s - ssim(&y, &x, h, w).unwrap()).abs() < 1e-12);
            prop_assert!(s <= 1.0 + 1e-12);
            prop_assert!((ssim(&x, &x, h, w).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_records_round_trip_bit_exactly(
        rows in 1..5usize,
        vals in vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
        name in "[a-z][a-z0-9_.]{0,20}",
    ) {
        let n = vals.len() / rows * rows;
        prop_assume!(n > 0);
        let t = Tensor::new(vec![rows, n / rows], vals[..n].to_vec()).unwrap();
        let s = Tensor::scalar(-0.0);
        let mut buf = Vec::new();
        write_records(&mut buf, &[(name.as_str(), &t), ("tail", &s)]).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 2);
        prop_assert_eq!(&back[0].name, &name);
        prop_assert_eq!(back[0].tensor.shape(), t.shape());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back[0].tensor.data()), bits(t.data()));
        prop_assert_eq!(back[1].tensor.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn cuts_inside_a_record_are_rejected(cut in 0..80usize) {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, &[("w", &t)]).unwrap();
        // the bare header is a valid empty file; model loading catches that case
        prop_assume!(cut < buf.len() && cut != 8);
        prop_assert!(read_records(&buf[..cut]).is_err());
    }

    #[test]
    fn pgm_round_trip_is_within_one_level((h, w, x) in plane()) {
        let (hh, ww, back) = decode_pgm(&encode_pgm(&x, h, w).unwrap()).unwrap();
        prop_assert_eq!((hh, ww), (h, w));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 0..500usize, seed in any::<u64>()) {
        let (train, test) = split_indices(n, seed);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!((train, test), split_indices(n, seed));
    }
}
