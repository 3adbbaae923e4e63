//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates compared; all of them when the input is smaller.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 64,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape(&[x.len()], &[analytic.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks: Vec<usize> = if opts.samples >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut v = sample(&mut rng, x.len(), opts.samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: picks.len(),
    };
    for &i in &picks {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let fp = f(&probe)?;
        probe[i] = orig - opts.step;
        let fm = f(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: if rel.is_finite() { rel } else { f64::INFINITY },
                worst_index: i,
                analytic: a,
                numeric,
                checked: picks.len(),
            };
        }
    }
    Ok(report)
}

/// Checks the tape gradient of the scalar built by `build` with respect to `x`.
pub fn check_tape<B>(x: &Tensor, build: B, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape().to_vec();
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(shape.clone(), data.to_vec())?);
        let out = build(&mut t, v)?;
        Ok(t.value(out).item())
    };
    grad_check(eval, x.data(), &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let r = check_tape(
            &x,
            |t, v| {
                let s = t.square(v)?;
                t.sum(s)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        // central differences are exact on quadratics; what remains is
        // cancellation, about ulp(f) / step relative to the smallest gradient
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = grad_check(|p| Ok(p[0] * p[0]), &[1.0], &[3.0], GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.3);
    }
}
