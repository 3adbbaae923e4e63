//! Frequency-weighted reconstruction likelihood and the ELBO pieces around it.
//!
//! The weight for kernel `k` is `W = conj(Λ) / (|Λ|² + C)`, `Λ` the DFT of the
//! centered, padded kernel. The weighted error `(1/HW)·Σ|W·(F(x) − F(x̂))|²`
//! is a spatial squared norm (Parseval), so an all-ones weight gives exactly
//! the per-image sum of squared errors.
//!
//! Batch reduction everywhere: sum over pixels and channels, mean over batch.

use std::f64::consts::PI;

use crate::circulant::BccbOperator;
use crate::error::{Error, Result};
use crate::fft::{self, ComplexGrid};
use crate::kernel::BlurKernel;
use crate::tensor::{Tape, Var};

/// Default Wiener constant.
pub const DEFAULT_C: f64 = 0.025;

#[derive(Clone, Debug)]
pub struct WienerWeight {
    grid: ComplexGrid,
    c: f64,
    kernel: Option<BlurKernel>,
}

impl WienerWeight {
    /// All-ones weight; the loss reduces to the plain squared error.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut grid = ComplexGrid::zeros(height, width);
        grid.re.fill(1.0);
        Self {
            grid,
            c: 0.0,
            kernel: None,
        }
    }

    /// Exact inverse `1/(λ + ε)` of a block-circulant operator.
    ///
    /// Paired with that operator the weighted likelihood is a proper Gaussian
    /// density with covariance `K(ε)K(ε)ᵀ`.
    pub fn inverse_of(op: &BccbOperator) -> Result<Self> {
        let (h, w) = op.dims();
        let lam = op.eigenvalues();
        let mut grid = ComplexGrid::zeros(h, w);
        for f in 0..lam.len() {
            let (re, im) = (lam.re[f] + op.epsilon(), lam.im[f]);
            let m2 = re * re + im * im;
            if m2 == 0.0 {
                return Err(Error::Singular(format!(
                    "operator has no inverse at frequency ({}, {})",
                    f / w,
                    f % w
                )));
            }
            grid.re[f] = re / m2;
            grid.im[f] = -im / m2;
        }
        Ok(Self {
            grid,
            c: 0.0,
            kernel: Some(op.kernel().clone()),
        })
    }

    pub fn grid(&self) -> &ComplexGrid {
        &self.grid
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn kernel(&self) -> Option<&BlurKernel> {
        self.kernel.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.grid.height, self.grid.width)
    }

    /// `|W|²` per frequency; the only part of the weight the loss value sees.
    pub fn gain_squared(&self) -> Vec<f64> {
        self.grid.abs2()
    }

    /// Filters a real image by the full complex gain: `F⁻¹(W·F(y))`.
    ///
    /// With `y = x ⊛ k` this is Wiener deconvolution.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        let (h, w) = self.dims();
        if y.len() != h * w {
            return Err(Error::shape(&[y.len()], &[h, w]));
        }
        let spec = fft::fft2(y, h, w)?;
        fft::ifft2(&spec.mul(&self.grid))
    }
}

/// `conj(Λ)/(|Λ|² + C)` for `Λ = fft2(pad_and_center_kernel(k))`.
pub fn build_weight(k: &BlurKernel, c: f64, height: usize, width: usize) -> Result<WienerWeight> {
    if c <= 0.0 || !c.is_finite() {
        return Err(Error::invalid(format!("Wiener constant must be positive, got {c}")));
    }
    let lam = fft::kernel_spectrum(k, height, width)?;
    let mut grid = ComplexGrid::zeros(height, width);
    for f in 0..lam.len() {
        let d = lam.re[f] * lam.re[f] + lam.im[f] * lam.im[f] + c;
        grid.re[f] = lam.re[f] / d;
        grid.im[f] = -lam.im[f] / d;
    }
    Ok(WienerWeight {
        grid,
        c,
        kernel: Some(k.clone()),
    })
}

/// Convenience wrapper: blur-free reconstruction estimate from a blurred image.
pub fn wiener_deconvolve(y: &[f64], k: &BlurKernel, c: f64, height: usize, width: usize) -> Result<Vec<f64>> {
    build_weight(k, c, height, width)?.apply(y)
}

/// `(1/HW)·Σ|W·(F(x) − F(x̂))|²` for one single-channel image.
pub fn weighted_error(x: &[f64], xhat: &[f64], w: &WienerWeight) -> Result<f64> {
    let (h, wd) = w.dims();
    if x.len() != xhat.len() || x.len() != h * wd {
        return Err(Error::shape(&[x.len()], &[xhat.len()]));
    }
    let e: Vec<f64> = x.iter().zip(xhat).map(|(a, b)| a - b).collect();
    let spec = fft::fft2(&e, h, wd)?;
    let g = w.gain_squared();
    let s: f64 = (0..spec.len())
        .map(|f| g[f] * (spec.re[f] * spec.re[f] + spec.im[f] * spec.im[f]))
        .sum();
    Ok(s / (h * wd) as f64)
}

/// Weighted squared error on the tape for `x, x̂: [B, C, H, W]`.
///
/// `weights` holds one weight per sample, or a single weight shared by all.
/// `x` should be a constant; the gradient flows to `x̂`.
pub fn weighted_recon_loss(tape: &mut Tape, x: Var, xhat: Var, weights: &[WienerWeight]) -> Result<Var> {
    let s = tape.shape(xhat).to_vec();
    if tape.shape(x) != s.as_slice() || s.len() != 4 {
        return Err(Error::shape(tape.shape(x), &s));
    }
    let b = s[0];
    if weights.len() != b && weights.len() != 1 {
        return Err(Error::invalid(format!("{} weights for a batch of {b}", weights.len())));
    }
    if weights.iter().any(|w| w.dims() != (s[2], s[3])) {
        return Err(Error::invalid("weight grid does not match image size"));
    }
    let gains: Vec<Vec<f64>> = (0..b)
        .map(|i| weights[if weights.len() == 1 { 0 } else { i }].gain_squared())
        .collect();
    let e = tape.sub(x, xhat)?;
    let q = tape.spectral_quadratic(e, gains)?;
    tape.mul_scalar(q, 1.0 / b.max(1) as f64)
}

/// Negative log-likelihood of `x` under `N(x̂, Σ)` with `Σ⁻¹ = WᵀW` and
/// `log|Σ| = 2·log|K(ε)|`, for one single-channel image:
/// `(D/2)·log 2π + log|K(ε)| + ½·‖W·(x − x̂)‖²`.
pub fn gaussian_log_likelihood(x: &[f64], xhat: &[f64], w: &WienerWeight, op: &BccbOperator) -> Result<f64> {
    if w.dims() != op.dims() {
        return Err(Error::invalid("weight and operator grids differ"));
    }
    let d = x.len() as f64;
    let quad = weighted_error(x, xhat, w)?;
    Ok(0.5 * d * (2.0 * PI).ln() + op.log_abs_det()? + 0.5 * quad)
}

/// `½·Σ(μ² + e^{logvar} − logvar − 1)`, averaged over the batch (axis 0).
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let b = tape.shape(mu)[0].max(1);
    let m2 = tape.square(mu)?;
    let ev = tape.exp(logvar)?;
    let t = tape.add(m2, ev)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    tape.mul_scalar(s, 0.5 / b as f64)
}

/// Closed-form KL for a single diagonal Gaussian against `N(0, I)`.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Per-image sum of squared errors.
    L2,
    /// Per-image sum of absolute errors.
    L1,
    /// Bernoulli cross-entropy on `(v + 1)/2`.
    Ce,
}

/// Baseline reconstruction losses for `x, x̂` in `[-1, 1]`, batch-averaged.
pub fn baseline_loss(tape: &mut Tape, kind: BaselineKind, x: Var, xhat: Var) -> Result<Var> {
    let s = tape.shape(xhat).to_vec();
    if tape.shape(x) != s.as_slice() {
        return Err(Error::shape(tape.shape(x), &s));
    }
    let b = s.first().copied().unwrap_or(1).max(1) as f64;
    let total = match kind {
        BaselineKind::L2 => {
            let e = tape.sub(x, xhat)?;
            let q = tape.square(e)?;
            tape.sum(q)?
        }
        BaselineKind::L1 => {
            let e = tape.sub(x, xhat)?;
            let a = tape.abs(e)?;
            tape.sum(a)?
        }
        BaselineKind::Ce => {
            let target: Vec<f64> = tape.value(x).data().iter().map(|v| (v + 1.0) / 2.0).collect();
            let p = tape.add_scalar(xhat, 1.0)?;
            let p = tape.mul_scalar(p, 0.5)?;
            let out_of_range = |v: &f64| !(0.0..=1.0).contains(v);
            if target.iter().any(out_of_range) || tape.value(p).data().iter().any(out_of_range) {
                return Err(Error::Domain(
                    "cross-entropy needs values in [0, 1] after (v+1)/2".into(),
                ));
            }
            tape.bce_sum(p, &target)?
        }
    };
    tape.mul_scalar(total, 1.0 / b)
}

/// Loss terms of one ELBO evaluation, all as quantities to minimize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon: f64,
    pub logdet: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

pub fn assemble_elbo(recon: f64, logdet: f64, kl: f64, beta: f64) -> ElboBreakdown {
    ElboBreakdown {
        recon,
        logdet,
        kl,
        beta,
        total: recon + logdet + beta * kl,
    }
}

/// Tape counterpart of [`assemble_elbo`]; `logdet` is `None` when omitted.
pub fn assemble_elbo_tape(tape: &mut Tape, recon: Var, logdet: Option<Var>, kl: Var, beta: f64) -> Result<Var> {
    let bkl = tape.mul_scalar(kl, beta)?;
    let t = tape.add(recon, bkl)?;
    match logdet {
        Some(ld) => tape.add(t, ld),
        None => Ok(t),
    }
}
