//! Radix-2 2-D discrete Fourier transform.
//!
//! Forward transforms are unnormalized; inverse transforms carry the
//! 1/(H·W) factor. With this convention Σx² = (1/HW)·Σ|X|².

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::BlurKernel;

/// H×W complex array, row-major, split into real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn from_real(x: &[f64], height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: x.to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.width + v;
        (self.re[i], self.im[i])
    }

    pub fn abs2(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).collect()
    }

    pub fn abs(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Pointwise complex product.
    pub fn mul(&self, other: &ComplexGrid) -> ComplexGrid {
        let mut out = ComplexGrid::zeros(self.height, self.width);
        for i in 0..self.len() {
            out.re[i] = self.re[i] * other.re[i] - self.im[i] * other.im[i];
            out.im[i] = self.re[i] * other.im[i] + self.im[i] * other.re[i];
        }
        out
    }

    /// Largest deviation from X[u,v] == conj(X[-u,-v]).
    pub fn hermitian_defect(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut worst: f64 = 0.0;
        for u in 0..h {
            for v in 0..w {
                let i = u * w + v;
                let j = ((h - u) % h) * w + (w - v) % w;
                worst = worst
                    .max((self.re[i] - self.re[j]).abs())
                    .max((self.im[i] + self.im[j]).abs());
            }
        }
        worst
    }

    fn max_abs(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .fold(0.0, f64::max)
    }
}

fn check_pow2(dim: &'static str, size: usize) -> Result<()> {
    if size == 0 || !size.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { dim, size });
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one strided line.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // exact twiddle per index rather than a running product
                let angle = sign * 2.0 * PI * (k * step) as f64 / n as f64;
                let (wi, wr) = angle.sin_cos();
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn transform(grid: &mut ComplexGrid, inverse: bool) {
    let (h, w) = (grid.height, grid.width);
    for r in 0..h {
        fft_line(
            &mut grid.re[r * w..(r + 1) * w],
            &mut grid.im[r * w..(r + 1) * w],
            inverse,
        );
    }
    let (mut cr, mut ci) = (vec![0.0; h], vec![0.0; h]);
    for c in 0..w {
        for r in 0..h {
            cr[r] = grid.re[r * w + c];
            ci[r] = grid.im[r * w + c];
        }
        fft_line(&mut cr, &mut ci, inverse);
        for r in 0..h {
            grid.re[r * w + c] = cr[r];
            grid.im[r * w + c] = ci[r];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        grid.re.iter_mut().for_each(|v| *v *= s);
        grid.im.iter_mut().for_each(|v| *v *= s);
    }
}

/// Unnormalized forward DFT of a real `height × width` image.
pub fn fft2(x: &[f64], height: usize, width: usize) -> Result<ComplexGrid> {
    check_pow2("height", height)?;
    check_pow2("width", width)?;
    if x.len() != height * width {
        return Err(Error::shape(&[x.len()], &[height, width]));
    }
    let mut g = ComplexGrid::from_real(x, height, width);
    transform(&mut g, false);
    Ok(g)
}

/// Complex-to-complex transform; `inverse` applies the 1/(HW) factor.
///
/// Dimensions must already be powers of two (true for every grid built by [`fft2`]).
pub fn fft2_complex(grid: &ComplexGrid, inverse: bool) -> ComplexGrid {
    debug_assert!(grid.height.is_power_of_two() && grid.width.is_power_of_two());
    let mut g = grid.clone();
    transform(&mut g, inverse);
    g
}

const HERMITIAN_TOL: f64 = 1e-9;

/// Inverse DFT of a Hermitian-symmetric spectrum, returning the real image.
///
/// Fails if the input is not Hermitian or the imaginary residue exceeds
/// tolerance (both relative to the largest magnitude, floored at 1).
pub fn ifft2(spectrum: &ComplexGrid) -> Result<Vec<f64>> {
    check_pow2("height", spectrum.height)?;
    check_pow2("width", spectrum.width)?;
    let scale = spectrum.max_abs().max(1.0);
    let defect = spectrum.hermitian_defect();
    if defect > HERMITIAN_TOL * scale {
        return Err(Error::invalid(format!(
            "spectrum is not Hermitian (defect {defect:.3e})"
        )));
    }
    let g = fft2_complex(spectrum, true);
    let residue = g.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if residue > HERMITIAN_TOL * scale {
        return Err(Error::invalid(format!("imaginary residue {residue:.3e}")));
    }
    Ok(g.re)
}

/// Separable direct DFT for arbitrary dimensions, O(HW·(H+W)).
///
/// Used where operator algebra must work on grids the radix-2 path rejects.
pub fn dft2_any(grid: &ComplexGrid, inverse: bool) -> ComplexGrid {
    if grid.height.is_power_of_two() && grid.width.is_power_of_two() {
        return fft2_complex(grid, inverse);
    }
    let (h, w) = (grid.height, grid.width);
    let sign = if inverse { 1.0 } else { -1.0 };
    let line = |re: &[f64], im: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut or = vec![0.0; n];
        let mut oi = vec![0.0; n];
        for k in 0..n {
            for (t, (xr, xi)) in re.iter().zip(im).enumerate() {
                let a = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let (s, c) = a.sin_cos();
                or[k] += xr * c - xi * s;
                oi[k] += xr * s + xi * c;
            }
        }
        (or, oi)
    };
    let mut g = grid.clone();
    for r in 0..h {
        let (or, oi) = line(&g.re[r * w..(r + 1) * w], &g.im[r * w..(r + 1) * w]);
        g.re[r * w..(r + 1) * w].copy_from_slice(&or);
        g.im[r * w..(r + 1) * w].copy_from_slice(&oi);
    }
    for c in 0..w {
        let cr: Vec<f64> = (0..h).map(|r| g.re[r * w + c]).collect();
        let ci: Vec<f64> = (0..h).map(|r| g.im[r * w + c]).collect();
        let (or, oi) = line(&cr, &ci);
        for r in 0..h {
            g.re[r * w + c] = or[r];
            g.im[r * w + c] = oi[r];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        g.re.iter_mut().for_each(|v| *v *= s);
        g.im.iter_mut().for_each(|v| *v *= s);
    }
    g
}

/// Inverse DFT keeping only the real part, without symmetry checks.
pub fn ifft2_real(spectrum: &ComplexGrid) -> Vec<f64> {
    fft2_complex(spectrum, true).re
}

/// Embeds a `size × size` kernel (odd size) into an `height × width` grid with
/// its center at (0, 0) under circular wrap.
pub fn pad_center_raw(weights: &[f64], size: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    if size.is_multiple_of(2) || weights.len() != size * size {
        return Err(Error::invalid(format!(
            "kernel must be odd-sized square, got size {size}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("empty image grid"));
    }
    let c = size / 2;
    let mut out = vec![0.0; height * width];
    // taps of a kernel wider than the grid wrap and accumulate, as the
    // circular operator would apply them
    for i in 0..size {
        for j in 0..size {
            let y = (i + height * size - c) % height;
            let x = (j + width * size - c) % width;
            out[y * width + x] += weights[i * size + j];
        }
    }
    Ok(out)
}

/// Kernel embedded at image size so that `fft2` of the result yields the
/// eigenvalues of the circular convolution operator.
pub fn pad_and_center_kernel(k: &BlurKernel, height: usize, width: usize) -> Result<Vec<f64>> {
    pad_center_raw(k.weights(), k.size(), height, width)
}

/// Eigenvalues of circular convolution with `k` on an `height × width` grid.
pub fn kernel_spectrum(k: &BlurKernel, height: usize, width: usize) -> Result<ComplexGrid> {
    fft2(&pad_and_center_kernel(k, height, width)?, height, width)
}

/// |Σx² − (1/HW)Σ|X|²| / Σx², or 0 for an all-zero image.
pub fn parseval_gap(x: &[f64], height: usize, width: usize) -> Result<f64> {
    let spatial: f64 = x.iter().map(|v| v * v).sum();
    if spatial == 0.0 {
        return Ok(0.0);
    }
    let spec = fft2(x, height, width)?;
    let freq: f64 = spec.abs2().iter().sum::<f64>() / (height * width) as f64;
    Ok((spatial - freq).abs() / spatial)
}

/// Circular convolution `x ⊛ k` through the frequency domain.
pub fn circular_convolve(x: &[f64], k: &BlurKernel, height: usize, width: usize) -> Result<Vec<f64>> {
    let lam = kernel_spectrum(k, height, width)?;
    let spec = fft2(x, height, width)?;
    Ok(ifft2_real(&spec.mul(&lam)))
}
