//! Block-circulant-with-circulant-blocks operators `K(ε) = K + εI`, where `K`
//! is circular convolution with a blur kernel on an H×W grid.
//!
//! The 2-D DFT diagonalizes `K`, so the eigenvalues are the transform of the
//! centered, zero-padded kernel and `log|K(ε)| = Σ log|λ + ε|`. Grids need not
//! be powers of two here; other sizes fall back to a direct separable DFT.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fft::{self, ComplexGrid};
use crate::kernel::BlurKernel;

/// Largest H·W accepted by [`BccbOperator::materialize_dense`].
pub const DENSE_LIMIT: usize = 4096;

/// Named ε presets; `Large` follows the value used for likelihood reporting.
pub const EPSILON_SMALL: f64 = 1e-3;
pub const EPSILON_LARGE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct BccbOperator {
    kernel: BlurKernel,
    height: usize,
    width: usize,
    eigenvalues: ComplexGrid,
    epsilon: f64,
}

impl BccbOperator {
    pub fn new(kernel: BlurKernel, height: usize, width: usize, epsilon: f64) -> Result<Self> {
        if epsilon < 0.0 || !epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        let padded = fft::pad_and_center_kernel(&kernel, height, width)?;
        let eigenvalues = fft::dft2_any(&ComplexGrid::from_real(&padded, height, width), false);
        Ok(Self {
            kernel,
            height,
            width,
            eigenvalues,
            epsilon,
        })
    }

    pub fn kernel(&self) -> &BlurKernel {
        &self.kernel
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Eigenvalues of `K` (without ε).
    pub fn eigenvalues(&self) -> &ComplexGrid {
        &self.eigenvalues
    }

    /// `log|det K(ε)|`. Half of `log|Σ_k|`, since `Σ_k = K Kᵀ`.
    pub fn log_abs_det(&self) -> Result<f64> {
        let mut total = 0.0;
        for f in 0..self.eigenvalues.len() {
            let m = (self.eigenvalues.re[f] + self.epsilon).hypot(self.eigenvalues.im[f]);
            if m <= 1e-300 {
                return Err(Error::Singular(format!(
                    "eigenvalue + epsilon vanishes at frequency ({}, {})",
                    f / self.width,
                    f % self.width
                )));
            }
            total += m.ln();
        }
        Ok(total)
    }

    /// `ifft2((λ + ε)·fft2(x))`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.height * self.width {
            return Err(Error::shape(&[x.len()], &[self.height, self.width]));
        }
        let mut spec = fft::dft2_any(&ComplexGrid::from_real(x, self.height, self.width), false);
        for f in 0..spec.len() {
            let (lr, li) = (self.eigenvalues.re[f] + self.epsilon, self.eigenvalues.im[f]);
            let (xr, xi) = (spec.re[f], spec.im[f]);
            spec.re[f] = lr * xr - li * xi;
            spec.im[f] = lr * xi + li * xr;
        }
        Ok(fft::dft2_any(&spec, true).re)
    }

    /// Dense `(HW)×(HW)` matrix of `K(ε)` acting on row-major `vec(x)`, built
    /// from the spatial definition of circular convolution.
    pub fn materialize_dense(&self) -> Result<DMatrix<f64>> {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        if n > DENSE_LIMIT {
            return Err(Error::invalid(format!(
                "dense materialization capped at {DENSE_LIMIT} pixels, got {n}"
            )));
        }
        let s = self.kernel.size();
        let c = self.kernel.center();
        let mut m = DMatrix::zeros(n, n);
        // (k ⊛ x)[p] = Σ_q k[q] x[p − q]
        for py in 0..h {
            for px in 0..w {
                let row = py * w + px;
                for i in 0..s {
                    for j in 0..s {
                        let qy = (py + h + c - i % h) % h;
                        let qx = (px + w + c - j % w) % w;
                        m[(row, qy * w + qx)] += self.kernel.at(i, j);
                    }
                }
                m[(row, row)] += self.epsilon;
            }
        }
        Ok(m)
    }
}
