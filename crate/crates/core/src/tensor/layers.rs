//! Parameter initialization and the dense layer shared by the networks.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Uniform on `(−1/√fan_in, 1/√fan_in)`, the usual default for linear and conv layers.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

/// `x·w + b` with `x: [B, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}
