//! Per-sample blur kernels: a closed-form least-squares fit and the kernel
//! generator network trained alongside the autoencoder.
//!
//! Both use circular convolution with the kernel center at offset zero,
//! `(x ⊛ k)[p] = Σ_q k[q]·x[p − q]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{BlurKernel, KernelNormalization};
use crate::tensor::layers::{linear, uniform_init};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const DEFAULT_KERNEL_SIZE: usize = 11;
pub const GENERATOR_HIDDEN: usize = 1000;
pub const DEFAULT_RIDGE: f64 = 1e-6;
const GENERATOR_SLOPE: f64 = 0.2;
/// Smallest accepted `min|pivot| / max|pivot|` of the unregularized normal matrix.
const PIVOT_RATIO_LIMIT: f64 = 1e-12;

/// Solves `min_k ‖x ⊛ k − x̂‖² + ridge·‖k‖²` over a `size × size` support.
///
/// The normal matrix is the circular autocorrelation of `x` at the support
/// offsets, the right-hand side the cross-correlation of `x` and `x̂`.
pub fn fit_kernel_least_squares(
    x: &[f64],
    xhat: &[f64],
    height: usize,
    width: usize,
    size: usize,
    ridge: f64,
) -> Result<BlurKernel> {
    if x.len() != height * width || xhat.len() != x.len() {
        return Err(Error::shape(&[x.len(), xhat.len()], &[height, width]));
    }
    if size.is_multiple_of(2) || size > height || size > width {
        return Err(Error::invalid(format!(
            "kernel size {size} must be odd and fit in {height}x{width}"
        )));
    }
    if ridge < 0.0 {
        return Err(Error::invalid("ridge must be nonnegative"));
    }
    let c = (size / 2) as isize;
    let n = size * size;
    let (hi, wi) = (height as isize, width as isize);
    let at = |img: &[f64], y: isize, xx: isize| img[(y.rem_euclid(hi) * wi + xx.rem_euclid(wi)) as usize];

    // autocorrelation R(dy, dx) = Σ_p x[p] x[p + d] for |d| < size
    let span = 2 * size - 1;
    let mut auto = vec![0.0; span * span];
    for dy in -(size as isize - 1)..size as isize {
        for dx in -(size as isize - 1)..size as isize {
            let mut s = 0.0;
            for y in 0..hi {
                for xx in 0..wi {
                    s += at(x, y, xx) * at(x, y + dy, xx + dx);
                }
            }
            auto[((dy + size as isize - 1) as usize) * span + (dx + size as isize - 1) as usize] = s;
        }
    }
    let offset = |q: usize| (q as isize / size as isize - c, q as isize % size as isize - c);
    let mut normal = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for q in 0..n {
        let (qy, qx) = offset(q);
        for r in 0..n {
            let (ry, rx) = offset(r);
            // Σ_p x[p − q] x[p − r] = R(q − r)
            let (dy, dx) = (qy - ry, qx - rx);
            normal[(q, r)] = auto[((dy + size as isize - 1) as usize) * span + (dx + size as isize - 1) as usize];
        }
        let mut s = 0.0;
        for y in 0..hi {
            for xx in 0..wi {
                s += at(x, y - qy, xx - qx) * xhat[(y * wi + xx) as usize];
            }
        }
        rhs[q] = s;
        normal[(q, q)] += ridge;
    }
    let lu = normal.lu();
    let diag = lu.u().diagonal();
    let (lo, hi_p) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
        (lo.min(v.abs()), hi.max(v.abs()))
    });
    if hi_p == 0.0 || lo / hi_p < PIVOT_RATIO_LIMIT {
        return Err(Error::Singular(format!(
            "kernel normal equations are singular (pivot ratio {:.2e}); use a positive ridge",
            if hi_p == 0.0 { 0.0 } else { lo / hi_p }
        )));
    }
    let k = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("kernel normal equations have no solution; use a positive ridge".into()))?;
    BlurKernel::from_raw(size, k.iter().copied().collect())
}

/// `‖x ⊛ k − x̂‖²` for one single-channel image.
pub fn kernel_fit_error(x: &[f64], xhat: &[f64], k: &BlurKernel, height: usize, width: usize) -> Result<f64> {
    let y = crate::fft::circular_convolve(x, k, height, width)?;
    Ok(y.iter().zip(xhat).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Nonnegative, unit-sum view of an arbitrary kernel (negatives clipped).
pub fn to_distribution(k: &BlurKernel) -> Result<BlurKernel> {
    let w: Vec<f64> = k.weights().iter().map(|v| v.max(0.0)).collect();
    BlurKernel::normalized(k.size(), w)
}

/// Second moment of [`to_distribution`], or `None` when no tap is positive.
pub fn distribution_second_moment(k: &BlurKernel) -> Result<Option<f64>> {
    if !k.weights().iter().any(|&v| v > 0.0) {
        return Ok(None);
    }
    to_distribution(k)?.second_moment().map(Some)
}

pub fn kernel_second_moment(k: &BlurKernel) -> Result<f64> {
    k.second_moment()
}

/// Two dense layers `latent → hidden → size²`; the last is zero-initialized,
/// so a fresh softmax generator emits the uniform kernel.
#[derive(Clone, Debug)]
pub struct KernelGenerator {
    pub params: ParamSet,
    latent_dim: usize,
    size: usize,
    mode: KernelNormalization,
}

impl KernelGenerator {
    pub fn new<R: Rng>(
        rng: &mut R,
        latent_dim: usize,
        size: usize,
        hidden: usize,
        mode: KernelNormalization,
    ) -> Result<Self> {
        if size.is_multiple_of(2) || latent_dim == 0 || hidden == 0 {
            return Err(Error::invalid("generator needs odd kernel size and nonzero widths"));
        }
        let mut params = ParamSet::new();
        params.push("g.fc1.w", uniform_init(rng, &[latent_dim, hidden], latent_dim), true);
        params.push("g.fc1.b", uniform_init(rng, &[hidden], latent_dim), true);
        params.push("g.fc2.w", Tensor::zeros(&[hidden, size * size]), true);
        params.push("g.fc2.b", Tensor::zeros(&[size * size]), true);
        Ok(Self {
            params,
            latent_dim,
            size,
            mode,
        })
    }

    /// Rebuilds a generator from stored parameters.
    pub fn from_params(params: ParamSet, mode: KernelNormalization) -> Result<Self> {
        let w1 = params
            .by_name("g.fc1.w")
            .ok_or_else(|| Error::invalid("missing g.fc1.w"))?;
        let w2 = params
            .by_name("g.fc2.w")
            .ok_or_else(|| Error::invalid("missing g.fc2.w"))?;
        let latent_dim = w1.value.shape()[0];
        let n = w2.value.shape()[1];
        let size = (n as f64).sqrt().round() as usize;
        if size * size != n || size.is_multiple_of(2) {
            return Err(Error::invalid(format!("generator output {n} is not an odd square")));
        }
        Ok(Self {
            params,
            latent_dim,
            size,
            mode,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mode(&self) -> KernelNormalization {
        self.mode
    }

    /// Kernel weights `[B, size²]` for `z: [B, latent]`; `vars` come from
    /// registering [`Self::params`] on the same tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let s = tape.shape(z);
        if s.len() != 2 || s[1] != self.latent_dim {
            return Err(Error::shape(s, &[0, self.latent_dim]));
        }
        let h = linear(tape, z, vars[0], vars[1])?;
        let h = tape.leaky_relu(h, GENERATOR_SLOPE)?;
        let logits = linear(tape, h, vars[2], vars[3])?;
        match self.mode {
            KernelNormalization::Simplex => tape.softmax(logits, 1),
            KernelNormalization::Raw => Ok(logits),
        }
    }

    /// Gradient-free evaluation for inference.
    pub fn generate(&self, z: &Tensor) -> Result<Vec<BlurKernel>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let k = self.forward(&mut tape, &vars, zv)?;
        kernels_from_tensor(tape.value(k), self.size, self.mode)
    }
}

/// Splits `[B, size²]` weights into kernels with the given normalization.
pub fn kernels_from_tensor(t: &Tensor, size: usize, mode: KernelNormalization) -> Result<Vec<BlurKernel>> {
    let n = size * size;
    if n == 0 || !t.numel().is_multiple_of(n) {
        return Err(Error::shape(t.shape(), &[0, n]));
    }
    t.data()
        .chunks(n)
        .map(|w| match mode {
            KernelNormalization::Simplex => BlurKernel::normalized(size, w.to_vec()),
            KernelNormalization::Raw => BlurKernel::from_raw(size, w.to_vec()),
        })
        .collect()
}

/// Mean over the batch of `‖x ⊛ k − x̂‖² / (HW)` for `x, x̂: [B, C, H, W]`,
/// `k: [B, size²]`. `x` and `x̂` should be constants.
pub fn kernel_fit_loss(tape: &mut Tape, x: Var, xhat: Var, k: Var, size: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || tape.shape(xhat) != s.as_slice() {
        return Err(Error::shape(&s, tape.shape(xhat)));
    }
    let blurred = tape.circular_conv(x, k, size)?;
    let e = tape.sub(blurred, xhat)?;
    let q = tape.square(e)?;
    let total = tape.sum(q)?;
    tape.mul_scalar(total, 1.0 / (s[0] * s[2] * s[3]).max(1) as f64)
}
