//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Values live in row-major [`Tensor`]s. Differentiable computations are
//! recorded on a [`Tape`] and addressed through [`Var`] handles; parameters
//! are owned by a [`ParamSet`] and copied onto a fresh tape every step.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod layers;
mod tape;

pub use conv::{conv2d_output_dim, conv_transpose2d_output_dim};
pub use tape::{BatchNormMode, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, populated for parameters after a backward pass.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(&self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&0);
        if start > end || end > n {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for leading dim {n}"
            )));
        }
        let stride = self.data.len().checked_div(n).unwrap_or(0);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Gathers entries of the leading axis in the given order.
    pub fn gather_outer(&self, idx: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&0);
        let stride = self.data.len().checked_div(n).unwrap_or(0);
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("index {i} out of range {n}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }
}

/// One named parameter or buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are saved but never optimized.
    pub trainable: bool,
}

/// Ordered, named parameter collection; the unit of checkpointing and optimization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Places every entry on the tape; trainable entries become gradient leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Places every entry on the tape as a constant (inference or stop-gradient).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Accumulates tape gradients of `vars` into the entries' `grad` buffers.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, v) in self.entries.iter_mut().zip(vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = tape.grad(*v) {
                match &mut p.value.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => p.value.grad = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// FNV-1a over names and value bits; used to assert which groups a step touched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.entries {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl FromIterator<Param> for ParamSet {
    fn from_iter<I: IntoIterator<Item = Param>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.slice_outer(1, 3).unwrap().data(), &[2., 3., 4., 5.]);
        assert_eq!(t.gather_outer(&[2, 0]).unwrap().data(), &[4., 5., 0., 1.]);
        assert!(t.gather_outer(&[3]).is_err());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::scalar(1.0), true);
        let before = ps.fingerprint();
        ps.get_mut(0).value.data_mut()[0] = 1.0 + 1e-15;
        assert_ne!(before, ps.fingerprint());
    }
}
