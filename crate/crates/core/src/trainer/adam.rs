//! Adam with bias correction over a [`ParamSet`].

use crate::tensor::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable entry holding a gradient, then clears gradients.
    /// A positive `clip` rescales the joint gradient to at most that norm.
    pub fn step(&mut self, params: &mut ParamSet, clip: f64) {
        self.t += 1;
        let scale = if clip > 0.0 {
            let norm = params
                .iter()
                .filter_map(|p| p.value.grad.as_ref())
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = p.value.grad.take() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g * scale;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap(), true);
        p.push("frozen", Tensor::scalar(5.0), false);
        p.get_mut(0).value.grad = Some(vec![2.0, -0.5, 0.0]);
        p.get_mut(1).value.grad = Some(vec![1.0]);
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, 0.0);
        let a = p.get(0).value.data();
        assert!((a[0] - 0.9).abs() < 1e-6 && (a[1] - 1.1).abs() < 1e-6 && a[2] == 1.0);
        assert_eq!(p.get(1).value.data(), &[5.0]);
        assert!(p.get(0).value.grad.is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true);
        let mut opt = Adam::new(0.05, &p);
        for _ in 0..2000 {
            let g: Vec<f64> = p.get(0).value.data().iter().map(|x| 2.0 * (x - 0.5)).collect();
            p.get_mut(0).value.grad = Some(g);
            opt.step(&mut p, 1.0);
        }
        assert!(p.get(0).value.data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
