//! Image quality and spectral statistics.
//!
//! Images are single-channel row-major `H × W` slices. Data in this crate
//! lives in `[-1, 1]`, so PSNR uses a peak-to-peak range of 2 there and SSIM
//! maps inputs to `[0, 1]` first.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::Tensor;

/// Peak-to-peak range of `[-1, 1]` data.
pub const SIGNED_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10·log10(max_val² / MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &[f64], xhat: &[f64], max_val: f64) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(Error::shape(&[x.len()], &[xhat.len()]));
    }
    if max_val <= 0.0 {
        return Err(Error::invalid("max_val must be positive"));
    }
    let mse = x.iter().zip(xhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, n: usize) -> f64 {
    let w1 = w + 1;
    s[(y + n) * w1 + x + n] - s[y * w1 + x + n] - s[(y + n) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over every `8 × 8` window (stride 1, uniform weights, population
/// moments) for images already in `[0, 1]`.
pub fn ssim_unit(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::shape(&[x.len(), y.len()], &[h, w]));
    }
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {n}x{n} SSIM window"
        )));
    }
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (sx, sy) = (integral(x, h, w), integral(y, h, w));
    let (sxx, syy, sxy) = (integral(&xx, h, w), integral(&yy, h, w), integral(&xy, h, w));
    let area = (n * n) as f64;
    let mut total = 0.0;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let mx = window_sum(&sx, w, r, c, n) / area;
            let my = window_sum(&sy, w, r, c, n) / area;
            let vx = window_sum(&sxx, w, r, c, n) / area - mx * mx;
            let vy = window_sum(&syy, w, r, c, n) / area - my * my;
            let cov = window_sum(&sxy, w, r, c, n) / area - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - n + 1) * (w - n + 1)) as f64)
}

/// [`ssim_unit`] for `[-1, 1]` images.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    let m = |v: &[f64]| v.iter().map(|a| (a + 1.0) / 2.0).collect::<Vec<_>>();
    ssim_unit(&m(x), &m(y), h, w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialBin {
    /// Integer radius `⌊√(u'² + v'²)⌋` of the bin.
    pub radius: usize,
    /// Mean exact radius of the frequencies in the bin.
    pub mean_radius: f64,
    pub mean_power: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    pub bins: Vec<RadialBin>,
    /// Decay exponent of `power ∝ 1/w^α`; `None` when the fit range has
    /// fewer than two bins with positive power.
    pub alpha: Option<f64>,
    pub fit_range: (usize, usize),
}

/// Signed frequency index in `[-n/2, n/2)`.
fn centered(u: usize, n: usize) -> isize {
    if u < n.div_ceil(2) {
        u as isize
    } else {
        u as isize - n as isize
    }
}

fn frequency_radius(f: usize, h: usize, w: usize) -> f64 {
    let (u, v) = (centered(f / w, h), centered(f % w, w));
    ((u * u + v * v) as f64).sqrt()
}

fn profile_from_power(power: &[f64], h: usize, w: usize) -> SpectrumProfile {
    let max_r = (0..h * w)
        .map(|f| frequency_radius(f, h, w).floor() as usize)
        .max()
        .unwrap_or(0);
    let mut sum_r = vec![0.0; max_r + 1];
    let mut sum_p = vec![0.0; max_r + 1];
    let mut count = vec![0usize; max_r + 1];
    for (f, p) in power.iter().enumerate() {
        let r = frequency_radius(f, h, w);
        let b = r.floor() as usize;
        sum_r[b] += r;
        sum_p[b] += p;
        count[b] += 1;
    }
    let bins: Vec<RadialBin> = (0..=max_r)
        .filter(|&b| count[b] > 0)
        .map(|b| RadialBin {
            radius: b,
            mean_radius: sum_r[b] / count[b] as f64,
            mean_power: sum_p[b] / count[b] as f64,
            count: count[b],
        })
        .collect();
    let fit_range = (2, (h.min(w) / 4).max(2));
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.radius >= fit_range.0 && b.radius <= fit_range.1 && b.mean_power > 0.0)
        .map(|b| (b.mean_radius.ln(), b.mean_power.ln()))
        .collect();
    let alpha = if pts.len() < 2 {
        None
    } else {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(-sxy / sxx)
    };
    SpectrumProfile { bins, alpha, fit_range }
}

/// Radially binned `|F(x)|²` with a log-log power-law fit over radii `[2, H/4]`.
pub fn radial_power_spectrum(x: &[f64], h: usize, w: usize) -> Result<SpectrumProfile> {
    let spec = fft::fft2(x, h, w)?;
    Ok(profile_from_power(&spec.abs2(), h, w))
}

/// Profile of the power spectrum averaged over a set of images.
pub fn mean_radial_power_spectrum(images: &[&[f64]], h: usize, w: usize) -> Result<SpectrumProfile> {
    if images.is_empty() {
        return Err(Error::invalid("empty image set"));
    }
    let mut power = vec![0.0; h * w];
    for img in images {
        let p = fft::fft2(img, h, w)?.abs2();
        power.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let n = images.len() as f64;
    power.iter_mut().for_each(|p| *p /= n);
    Ok(profile_from_power(&power, h, w))
}

/// Per-frequency mean of `log(1 + |F(x)|)` over a set.
pub fn mean_log_spectrum(images: &[&[f64]], h: usize, w: usize) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::invalid("empty image set"));
    }
    let mut acc = vec![0.0; h * w];
    for img in images {
        let a = fft::fft2(img, h, w)?.abs();
        acc.iter_mut().zip(a).for_each(|(s, v)| *s += v.ln_1p());
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Mean over all frequencies of the absolute difference of mean log-spectra.
pub fn spectrum_gap(set_a: &[&[f64]], set_ref: &[&[f64]], h: usize, w: usize) -> Result<f64> {
    spectrum_gap_band(set_a, set_ref, h, w, None)
}

/// [`spectrum_gap`] restricted to frequencies with radius strictly above `min_radius`.
pub fn spectrum_gap_band(
    set_a: &[&[f64]],
    set_ref: &[&[f64]],
    h: usize,
    w: usize,
    min_radius: Option<f64>,
) -> Result<f64> {
    let a = mean_log_spectrum(set_a, h, w)?;
    let r = mean_log_spectrum(set_ref, h, w)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..h * w {
        if min_radius.is_some_and(|m| frequency_radius(f, h, w) <= m) {
            continue;
        }
        total += (a[f] - r[f]).abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no frequencies above the requested radius"));
    }
    Ok(total / count as f64)
}

/// Splits `[N, C, H, W]` into its `H × W` planes.
pub fn planes(t: &Tensor) -> Result<Vec<&[f64]>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("expected [N, C, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    if plane == 0 {
        return Ok(Vec::new());
    }
    Ok(t.data().chunks(plane).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ssim_naive(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let n = SSIM_WINDOW;
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut windows = 0;
        for r in 0..=h - n {
            for c in 0..=w - n {
                let mut px = Vec::new();
                let mut py = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        px.push(x[(r + i) * w + c + j]);
                        py.push(y[(r + i) * w + c + j]);
                    }
                }
                let m = (n * n) as f64;
                let mx = px.iter().sum::<f64>() / m;
                let my = py.iter().sum::<f64>() / m;
                let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / m;
                let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / m;
                let cv = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / m;
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        total / windows as f64
    }

    #[test]
    fn psnr_examples() {
        let x = vec![0.5; 16];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &y[..4], 1.0).is_err());
    }

    #[test]
    fn psnr_hand_computed_pair() {
        // 8x8 ramp vs ramp with a fixed checker offset: errors ±0.05 and 0.15 in alternating rows
        let x: Vec<f64> = (0..64).map(|i| i as f64 / 63.0 * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..64)
            .map(|i| {
                x[i] + if (i / 8) % 2 == 0 {
                    if i % 2 == 0 {
                        0.05
                    } else {
                        -0.05
                    }
                } else {
                    0.15
                }
            })
            .collect();
        // MSE = (32·0.0025 + 32·0.0225)/64 = 0.0125; PSNR = 10·log10(4/0.0125) = 10·log10(320)
        assert!((psnr(&x, &y, 2.0).unwrap() - 25.051_499_783_199_06).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16 * 12).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| (v * 0.7 + rng.random_range(0.0..0.3)).min(1.0))
            .collect();
        let fast = ssim_unit(&x, &y, 16, 12).unwrap();
        assert!((fast - ssim_naive(&x, &y, 16, 12)).abs() < 1e-10);
        assert!((ssim_unit(&x, &x, 16, 12).unwrap() - 1.0).abs() < 1e-12);
        assert!((fast - ssim_unit(&y, &x, 16, 12).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ssim_of_inverted_binary_is_nonpositive() {
        let x: Vec<f64> = (0..256)
            .map(|i| if (i / 16 + i % 16) % 3 == 0 { 1.0 } else { 0.0 })
            .collect();
        let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!(ssim_unit(&x, &inv, 16, 16).unwrap() <= 0.0);
        assert!(ssim_unit(&x[..49], &x[..49], 7, 7).is_err());
    }

    #[test]
    fn radial_bins_partition_frequencies() {
        let x = vec![0.25; 16 * 16];
        let p = radial_power_spectrum(&x, 16, 16).unwrap();
        assert_eq!(p.bins.iter().map(|b| b.count).sum::<usize>(), 256);
        assert_eq!(p.bins[0].count, 1);
        assert!(p.bins[1..].iter().all(|b| b.mean_power == 0.0));
        assert_eq!(p.alpha, None);
        assert!(p.bins.windows(2).all(|w| w[0].radius < w[1].radius));
    }

    #[test]
    fn white_noise_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut alpha = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
            alpha += radial_power_spectrum(&x, 32, 32).unwrap().alpha.unwrap();
        }
        assert!((alpha / 100.0).abs() < 0.3);
    }

    #[test]
    fn constructed_power_law_field() {
        // amplitude 1/w per frequency => power 1/w²; Hermitian random phases
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = fft::ComplexGrid::zeros(n, n);
        for u in 0..n {
            for v in 0..n {
                let i = u * n + v;
                let j = ((n - u) % n) * n + (n - v) % n;
                if j < i {
                    continue;
                }
                let r = frequency_radius(i, n, n);
                if r == 0.0 {
                    continue;
                }
                let phase = if i == j {
                    0.0
                } else {
                    rng.random_range(0.0..std::f64::consts::TAU)
                };
                g.re[i] = phase.cos() / r;
                g.im[i] = phase.sin() / r;
                g.re[j] = g.re[i];
                g.im[j] = -g.im[i];
            }
        }
        let x = fft::ifft2(&g).unwrap();
        let a = radial_power_spectrum(&x, n, n).unwrap().alpha.unwrap();
        assert!((a - 2.0).abs() < 0.1, "{a}");
    }

    #[test]
    fn gap_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..256).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|img| {
                fft::circular_convolve(img, &crate::kernel::BlurKernel::gaussian(5, 1.0).unwrap(), 16, 16).unwrap()
            })
            .collect();
        let ra: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let rb: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
        assert_eq!(spectrum_gap(&ra, &ra, 16, 16).unwrap(), 0.0);
        let g = spectrum_gap(&rb, &ra, 16, 16).unwrap();
        assert!(g > 0.0);
        assert_eq!(g, spectrum_gap(&ra, &rb, 16, 16).unwrap());
        let high = spectrum_gap_band(&rb, &ra, 16, 16, Some(4.0)).unwrap();
        let low = {
            let ma = mean_log_spectrum(&rb, 16, 16).unwrap();
            let mr = mean_log_spectrum(&ra, 16, 16).unwrap();
            let idx: Vec<usize> = (0..256).filter(|f| frequency_radius(*f, 16, 16) <= 4.0).collect();
            idx.iter().map(|f| (ma[*f] - mr[*f]).abs()).sum::<f64>() / idx.len() as f64
        };
        assert!(high > low);
        assert!(spectrum_gap(&[], &ra, 16, 16).is_err());
    }
}
