use crate::error::{Error, Result};

/// How a kernel's weights are constrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelNormalization {
    /// Nonnegative, summing to one (a distribution over offsets).
    Simplex,
    /// Unconstrained real weights.
    Raw,
}

/// Odd-sized square blur kernel; the center entry is offset (0, 0).
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    normalization: KernelNormalization,
}

const SIMPLEX_TOL: f64 = 1e-12;

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>, normalization: KernelNormalization) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::invalid(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        if normalization == KernelNormalization::Simplex {
            let sum: f64 = weights.iter().sum();
            if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::invalid(format!(
                    "simplex kernel must be nonnegative with unit sum (sum = {sum})"
                )));
            }
        }
        Ok(Self {
            size,
            weights,
            normalization,
        })
    }

    pub fn from_raw(size: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(size, weights, KernelNormalization::Raw)
    }

    /// Rescales nonnegative weights to unit sum.
    pub fn normalized(size: usize, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("cannot normalize kernel with non-positive mass"));
        }
        Self::new(
            size,
            weights.iter().map(|w| w / sum).collect(),
            KernelNormalization::Simplex,
        )
    }

    /// Identity kernel (unit mass at the center).
    pub fn delta(size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        let mut w = vec![0.0; size * size];
        w[(size / 2) * size + size / 2] = 1.0;
        Self {
            size,
            weights: w,
            normalization: KernelNormalization::Simplex,
        }
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::normalized(size, vec![1.0; size * size])
    }

    /// Truncated isotropic Gaussian with unit sum.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::invalid("gaussian sigma must be positive"));
        }
        let c = (size / 2) as f64;
        let w = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Self::normalized(size, w)
    }

    /// `c · δ`.
    pub fn scaled_delta(size: usize, c: f64) -> Self {
        let mut k = Self::delta(size);
        k.weights[(size / 2) * size + size / 2] = c;
        k.normalization = KernelNormalization::Raw;
        k
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn center(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalization(&self) -> KernelNormalization {
        self.normalization
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    /// Σ k[i,j]·((i−c)² + (j−c)²); only defined for simplex kernels.
    pub fn second_moment(&self) -> Result<f64> {
        if self.normalization != KernelNormalization::Simplex {
            return Err(Error::invalid(
                "second moment is only defined for simplex-normalized kernels",
            ));
        }
        let c = self.center() as f64;
        Ok(self
            .weights
            .iter()
            .enumerate()
            .map(|(idx, w)| {
                let (i, j) = ((idx / self.size) as f64, (idx % self.size) as f64);
                w * ((i - c).powi(2) + (j - c).powi(2))
            })
            .sum())
    }

    /// Zero-pads (or centrally crops) to another odd size.
    pub fn resized(&self, size: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::invalid("kernel size must be odd"));
        }
        let mut w = vec![0.0; size * size];
        let (co, cn) = (self.center() as isize, (size / 2) as isize);
        for i in 0..self.size {
            for j in 0..self.size {
                let (y, x) = (i as isize - co + cn, j as isize - co + cn);
                if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                    w[y as usize * size + x as usize] = self.at(i, j);
                }
            }
        }
        Self::new(size, w, KernelNormalization::Raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_moment_examples() {
        assert_eq!(BlurKernel::delta(5).second_moment().unwrap(), 0.0);
        let u = BlurKernel::uniform(3).unwrap();
        assert!((u.second_moment().unwrap() - 4.0 / 3.0).abs() < 1e-14);
        let raw = BlurKernel::from_raw(3, vec![0.0; 9]).unwrap();
        assert!(raw.second_moment().is_err());
    }

    #[test]
    fn gaussian_second_moment_near_two_sigma_squared() {
        // wide support so truncation is negligible; compare against direct summation
        let sigma = 1.2;
        let k = BlurKernel::gaussian(21, sigma).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                let w = (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
                num += w * (i * i + j * j) as f64;
                den += w;
            }
        }
        let m2 = k.second_moment().unwrap();
        assert!((m2 - num / den).abs() < 1e-12);
        assert!((m2 - 2.0 * sigma * sigma).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(BlurKernel::from_raw(2, vec![0.0; 4]).is_err());
        assert!(BlurKernel::new(3, vec![0.2; 9], KernelNormalization::Simplex).is_err());
        assert!(BlurKernel::gaussian(3, 0.0).is_err());
    }

    #[test]
    fn simplex_invariant_holds_for_constructors() {
        for k in [BlurKernel::gaussian(11, 2.0).unwrap(), BlurKernel::uniform(5).unwrap()] {
            assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(k.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn resize_keeps_center() {
        let k = BlurKernel::delta(3).resized(7).unwrap();
        assert_eq!(k.at(3, 3), 1.0);
    }
}
