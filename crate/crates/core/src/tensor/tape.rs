use super::conv::{self, Geometry};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fft::{self, ComplexGrid};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Batch statistics; running statistics are updated in place.
    Train,
    /// Running statistics only.
    Eval,
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] inside the cross-entropy.
const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Abs,
    Neg,
    Tanh,
    LeakyRelu(f64),
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Sum(Var),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: Geometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    SpectralQuadratic {
        e: Var,
        weights: Vec<Vec<f64>>,
    },
    CircularConv {
        x: Var,
        k: Var,
        size: usize,
    },
    BccbLogDet {
        k: Var,
        size: usize,
        height: usize,
        width: usize,
        inv_eig: Vec<ComplexGrid>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Node order is a topological order, so `backward` walks indices downward.
/// Leaf gradients persist across `backward` calls until [`Tape::zero_grads`].
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(a.shape(), b.shape()))
    }
}

/// Reduces an output-shaped gradient onto an operand that may have been broadcast.
fn reduce_to(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn acc(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            strict: true,
        }
    }

    /// In strict mode `log` of non-positive values and division by zero are errors.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, including leaf gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.value(v).clone();
        value.grad = None;
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], check_finite: bool) -> Var {
        if cfg!(debug_assertions) && check_finite {
            let inputs_finite = inputs.iter().all(|v| self.value(*v).is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "non-finite output from finite inputs"
            );
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta, tb)?;
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        if let Binary::Div = kind {
            if self.strict && tb.data().contains(&0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(ta, i), at(tb, i));
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let check = !matches!(kind, Binary::Div);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b), &[a, b], check))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Unary::Log = kind {
            if self.strict && ta.data().iter().any(|v| *v <= 0.0) {
                return Err(Error::Domain("log of non-positive value".into()));
            }
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Abs => x.abs(),
                Unary::Neg => -x,
                Unary::Tanh => x.tanh(),
                Unary::LeakyRelu(s) => {
                    if x > 0.0 {
                        x
                    } else {
                        s * x
                    }
                }
                Unary::AddScalar(c) => x + c,
                Unary::MulScalar(c) => x * c,
                Unary::PowScalar(p) => x.powf(p),
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let check = !matches!(kind, Unary::Exp | Unary::Log | Unary::PowScalar(_));
        Ok(self.push(value, Op::Unary(kind, a), &[a], check))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    /// The derivative at exactly zero is taken to be `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Unary::MulScalar(c), a)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(Unary::PowScalar(p), a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a], true))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b], true))
    }

    /// Adds `bias[n]` along axis 1 of `a` (`[B, N]` or `[B, N, H, W]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let sa = ta.shape();
        if sa.len() < 2 || tb.numel() != sa[1] {
            return Err(Error::shape(sa, tb.shape()));
        }
        let inner: usize = sa[2..].iter().product();
        let n = sa[1];
        let mut data = ta.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % n];
        }
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias), &[a, bias], true))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a], true))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::invalid(format!(
                "column slice {start}..{end} invalid for shape {s:?}"
            )));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(value, Op::SliceCols { a, start }, &[a], true))
    }

    /// 2-D cross-correlation. `x: [B, C, H, W]`, `w: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(&sx, &sw));
        }
        let geom = Geometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: conv::conv2d_output_dim(sx[2], sw[2], stride, pad)?,
            out_w: conv::conv2d_output_dim(sx[3], sw[3], stride, pad)?,
        };
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), sx[0], sw[0], &geom);
        let value = Tensor::new(vec![sx[0], sw[0], geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w], true))
    }

    /// Adjoint of [`Tape::conv2d`] with the same geometry.
    /// `x: [B, F, h, w]`, `w: [F, C, kh, kw]`, output `[B, C, H, W]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::shape(&sx, &sw));
        }
        let geom = Geometry {
            channels: sw[1],
            height: conv::conv_transpose2d_output_dim(sx[2], sw[2], stride, pad)?,
            width: conv::conv_transpose2d_output_dim(sx[3], sw[3], stride, pad)?,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            out_h: sx[2],
            out_w: sx[3],
        };
        let out = conv::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), sx[0], sw[0], &geom);
        let value = Tensor::new(vec![sx[0], sw[1], geom.height, geom.width], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, geom }, &[x, w], true))
    }

    /// Per-channel batch normalization of `x: [B, C, H, W]`.
    ///
    /// Train mode normalizes with biased batch statistics and folds the
    /// unbiased variance into the running buffers with momentum 0.1.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: BatchNormMode,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid(format!("batchnorm2d expects 4-D input, got {sx:?}")));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::invalid("batchnorm2d parameter length != channels"));
        }
        let train = mode == BatchNormMode::Train;
        if train && b < 2 {
            return Err(Error::invalid("batchnorm2d in train mode needs batch size >= 2"));
        }
        let n = (b * hw) as f64;
        let xd = self.value(x).data();
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mean = s / n;
                let mut ss = 0.0;
                for bi in 0..b {
                    for v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        ss += (v - mean) * (v - mean);
                    }
                }
                let var = ss / n;
                running_mean[ch] = (1.0 - BATCHNORM_MOMENTUM) * running_mean[ch] + BATCHNORM_MOMENTUM * mean;
                let unbiased = if n > 1.0 { ss / (n - 1.0) } else { var };
                running_var[ch] = (1.0 - BATCHNORM_MOMENTUM) * running_var[ch] + BATCHNORM_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (running_mean[ch], running_var[ch])
            };
            means[ch] = mean;
            inv_std[ch] = 1.0 / (var + BATCHNORM_EPS).sqrt();
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / hw) % c;
            *xh = (xd[i] - means[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let value = Tensor::new(sx, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push(value, op, &[x, gamma, beta], true))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::Softmax { a, outer, len, inner }, &[a], true))
    }

    /// Summed Bernoulli cross-entropy of probabilities `p` against fixed `target`.
    pub fn bce_sum(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != target.len() {
            return Err(Error::shape(tp.shape(), &[target.len()]));
        }
        let mut s = 0.0;
        for (&pv, &t) in tp.data().iter().zip(target) {
            let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            s -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let op = Op::Bce {
            p,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[p], true))
    }

    /// `Σ_b Σ_c (1/HW) Σ_f weights[b][f] · |DFT(e[b,c])_f|²` for `e: [B, C, H, W]`.
    ///
    /// `weights[b]` must be real and symmetric under frequency negation
    /// (the squared magnitude of a Hermitian gain).
    pub fn spectral_quadratic(&mut self, e: Var, weights: Vec<Vec<f64>>) -> Result<Var> {
        let s = self.shape(e).to_vec();
        if s.len() != 4 || weights.len() != s[0] || weights.iter().any(|w| w.len() != s[2] * s[3]) {
            return Err(Error::invalid(format!(
                "spectral weights do not match error tensor {s:?}"
            )));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let d = self.value(e).data();
        let mut total = 0.0;
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                let spec = fft::fft2(&d[off..off + plane], h, w)?;
                let mut acc = 0.0;
                for f in 0..plane {
                    acc += weights[bi][f] * (spec.re[f] * spec.re[f] + spec.im[f] * spec.im[f]);
                }
                total += acc / plane as f64;
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::SpectralQuadratic { e, weights }, &[e], true))
    }

    /// Per-sample circular convolution `x[b] ⊛ k[b]` with the kernel center at offset 0.
    /// `x: [B, C, H, W]`, `k: [B, size, size]` or `[B, size²]`, size odd.
    pub fn circular_conv(&mut self, x: Var, k: Var, size: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if size.is_multiple_of(2) || sx.len() != 4 || sk.is_empty() || sk[0] != sx[0] {
            return Err(Error::shape(&sx, &sk));
        }
        if self.value(k).numel() != sx[0] * size * size || size > sx[2] || size > sx[3] {
            return Err(Error::shape(&sx, &sk));
        }
        let out = circ_conv_forward(self.value(x).data(), self.value(k).data(), &sx, size);
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::CircularConv { x, k, size }, &[x, k], true))
    }

    /// `Σ_b Σ_f log|λ_b,f + eps|`, where λ_b are the eigenvalues of the
    /// block-circulant operator of kernel `k[b]` on an `height × width` grid.
    pub fn bccb_logdet(&mut self, k: Var, size: usize, height: usize, width: usize, eps: f64) -> Result<Var> {
        let sk = self.shape(k).to_vec();
        let b = *sk.first().unwrap_or(&0);
        if size.is_multiple_of(2) || self.value(k).numel() != b * size * size {
            return Err(Error::invalid(format!(
                "kernel tensor {sk:?} is not [B, {size}, {size}]"
            )));
        }
        let kd = self.value(k).data();
        let mut total = 0.0;
        let mut inv_eig = Vec::with_capacity(b);
        for bi in 0..b {
            let padded = fft::pad_center_raw(&kd[bi * size * size..(bi + 1) * size * size], size, height, width)?;
            let lam = fft::fft2(&padded, height, width)?;
            let mut inv = ComplexGrid::zeros(height, width);
            for f in 0..height * width {
                let (re, im) = (lam.re[f] + eps, lam.im[f]);
                let m2 = re * re + im * im;
                if m2.sqrt() <= 1e-300 {
                    return Err(Error::Singular(format!(
                        "sample {bi}: eigenvalue + eps vanishes at frequency ({}, {})",
                        f / width,
                        f % width
                    )));
                }
                total += 0.5 * m2.ln();
                inv.re[f] = re / m2;
                inv.im[f] = -im / m2;
            }
            inv_eig.push(inv);
        }
        let op = Op::BccbLogDet {
            k,
            size,
            height,
            width,
            inv_eig,
        };
        Ok(self.push(Tensor::scalar(total), op, &[k], true))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, leaf_grads, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => acc(&mut leaf_grads[i], g),
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let at = |t: &Tensor, j: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[j] };
                    if need(*a) {
                        let ga: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul => g.iter().enumerate().map(|(j, gj)| gj * at(tb, j)).collect(),
                            Binary::Div => g.iter().enumerate().map(|(j, gj)| gj / at(tb, j)).collect(),
                        };
                        acc(&mut grads[a.0], reduce_to(ta, ga));
                    }
                    if need(*b) {
                        let gb: Vec<f64> = match kind {
                            Binary::Add => g.clone(),
                            Binary::Sub => g.iter().map(|v| -v).collect(),
                            Binary::Mul => g.iter().enumerate().map(|(j, gj)| gj * at(ta, j)).collect(),
                            Binary::Div => g
                                .iter()
                                .enumerate()
                                .map(|(j, gj)| {
                                    let y = at(tb, j);
                                    -gj * at(ta, j) / (y * y)
                                })
                                .collect(),
                        };
                        acc(&mut grads[b.0], reduce_to(tb, gb));
                    }
                }
                Op::Unary(kind, a) => {
                    let (x, y) = (val(*a).data(), node.value.data());
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(j, gj)| {
                            gj * match kind {
                                Unary::Exp => y[j],
                                Unary::Log => 1.0 / x[j],
                                Unary::Abs => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else if x[j] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Neg => -1.0,
                                Unary::Tanh => 1.0 - y[j] * y[j],
                                Unary::LeakyRelu(s) => {
                                    if x[j] > 0.0 {
                                        1.0
                                    } else {
                                        *s
                                    }
                                }
                                Unary::AddScalar(_) => 1.0,
                                Unary::MulScalar(c) => *c,
                                Unary::PowScalar(p) => p * x[j].powf(p - 1.0),
                            }
                        })
                        .collect();
                    acc(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if need(*a) {
                        let mut ga = vec![0.0; m * k];
                        conv::gemm(m, n, k, &g, false, tb.data(), true, &mut ga, 0.0);
                        acc(&mut grads[a.0], ga);
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; k * n];
                        conv::gemm(k, m, n, ta.data(), true, &g, false, &mut gb, 0.0);
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::AddBias(a, bias) => {
                    if need(*bias) {
                        let s = val(*a).shape();
                        let inner: usize = s[2..].iter().product();
                        let n = s[1];
                        let mut gb = vec![0.0; n];
                        for (j, gj) in g.iter().enumerate() {
                            gb[(j / inner) % n] += gj;
                        }
                        acc(&mut grads[bias.0], gb);
                    }
                    if need(*a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::Reshape(a) => acc(&mut grads[a.0], g),
                Op::SliceCols { a, start } => {
                    let s = val(*a).shape();
                    let (m, n) = (s[0], s[1]);
                    let width = node.value.shape()[1];
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Conv2d { x, w, geom } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (gx, gw) = conv::conv2d_backward(
                        tx.data(),
                        tw.data(),
                        &g,
                        tx.shape()[0],
                        tw.shape()[0],
                        geom,
                        need(*x),
                        need(*w),
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads[x.0], gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads[w.0], gw);
                    }
                }
                Op::ConvTranspose2d { x, w, geom } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (gx, gw) = conv::conv_transpose2d_backward(
                        tx.data(),
                        tw.data(),
                        &g,
                        tx.shape()[0],
                        tw.shape()[0],
                        geom,
                        need(*x),
                        need(*w),
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads[x.0], gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads[w.0], gw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let s = val(*x).shape();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let gd = val(*gamma).data();
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (j, gj) in g.iter().enumerate() {
                        let ch = (j / hw) % c;
                        sum_g[ch] += gj;
                        sum_gx[ch] += gj * xhat[j];
                    }
                    if need(*x) {
                        let n = (b * hw) as f64;
                        let gx: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(j, gj)| {
                                let ch = (j / hw) % c;
                                if *train {
                                    gd[ch] * inv_std[ch] / n * (n * gj - sum_g[ch] - xhat[j] * sum_gx[ch])
                                } else {
                                    gd[ch] * inv_std[ch] * gj
                                }
                            })
                            .collect();
                        acc(&mut grads[x.0], gx);
                    }
                    if need(*gamma) {
                        acc(&mut grads[gamma.0], sum_gx);
                    }
                    if need(*beta) {
                        acc(&mut grads[beta.0], sum_g);
                    }
                }
                Op::Softmax { a, outer, len, inner } => {
                    let y = node.value.data();
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                ga[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::Bce { p, target } => {
                    let pd = val(*p).data();
                    let gp: Vec<f64> = pd
                        .iter()
                        .zip(target)
                        .map(|(&pv, &t)| {
                            if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                g[0] * (pv - t) / (pv * (1.0 - pv))
                            }
                        })
                        .collect();
                    acc(&mut grads[p.0], gp);
                }
                Op::SpectralQuadratic { e, weights } => {
                    let s = val(*e).shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let plane = h * w;
                    let d = val(*e).data();
                    let mut ge = vec![0.0; d.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let mut spec = fft::fft2(&d[off..off + plane], h, w)?;
                            for f in 0..plane {
                                spec.re[f] *= weights[bi][f];
                                spec.im[f] *= weights[bi][f];
                            }
                            let back = fft::ifft2_real(&spec);
                            for (dst, v) in ge[off..off + plane].iter_mut().zip(back) {
                                *dst = 2.0 * g[0] * v;
                            }
                        }
                    }
                    acc(&mut grads[e.0], ge);
                }
                Op::CircularConv { x, k, size } => {
                    let (tx, tk) = (val(*x), val(*k));
                    let (gx, gk) = circ_conv_backward(tx.data(), tk.data(), &g, tx.shape(), *size, need(*x), need(*k));
                    if let Some(gx) = gx {
                        acc(&mut grads[x.0], gx);
                    }
                    if let Some(gk) = gk {
                        acc(&mut grads[k.0], gk);
                    }
                }
                Op::BccbLogDet {
                    k,
                    size,
                    height,
                    width,
                    inv_eig,
                } => {
                    let (s, h, w) = (*size, *height, *width);
                    let c = s / 2;
                    let mut gk = vec![0.0; val(*k).numel()];
                    for (bi, inv) in inv_eig.iter().enumerate() {
                        let tr = fft::fft2_complex(inv, false);
                        for i in 0..s {
                            for j in 0..s {
                                let y = (i + h - c) % h;
                                let x = (j + w - c) % w;
                                gk[bi * s * s + i * s + j] = g[0] * tr.re[y * w + x];
                            }
                        }
                    }
                    acc(&mut grads[k.0], gk);
                }
            }
        }
        Ok(())
    }
}

fn circ_conv_forward(x: &[f64], k: &[f64], shape: &[usize], size: usize) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let half = (size / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let kb = &k[bi * size * size..(bi + 1) * size * size];
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let (src, dst) = (&x[off..off + h * w], &mut out[off..off + h * w]);
            for i in 0..size {
                let dy = i as isize - half;
                for j in 0..size {
                    let kv = kb[i * size + j];
                    if kv == 0.0 {
                        continue;
                    }
                    let dx = j as isize - half;
                    for y in 0..h {
                        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                        let row = &src[sy * w..(sy + 1) * w];
                        for xx in 0..w {
                            let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                            dst[y * w + xx] += kv * row[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn circ_conv_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    shape: &[usize],
    size: usize,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let half = (size / 2) as isize;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gk = need_k.then(|| vec![0.0; k.len()]);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            for i in 0..size {
                let dy = i as isize - half;
                for j in 0..size {
                    let dx = j as isize - half;
                    let kidx = bi * size * size + i * size + j;
                    let mut acc_k = 0.0;
                    for y in 0..h {
                        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                        for xx in 0..w {
                            let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                            let gv = g[off + y * w + xx];
                            acc_k += gv * x[off + sy * w + sx];
                            if let Some(gx) = gx.as_mut() {
                                gx[off + sy * w + sx] += k[kidx] * gv;
                            }
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kidx] += acc_k;
                    }
                }
            }
        }
    }
    (gx, gk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[2.0]));
        let b = tape.leaf(t(&[1], &[3.0]));
        let c = tape.mul(a, b).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn exp_log_identity_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1], &[0.7]));
        let l = tape.log(a).unwrap();
        let e = tape.exp(l).unwrap();
        tape.backward(e).unwrap();
        assert!((tape.grad(a).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { left, right }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn strict_mode_domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(a), Err(Error::Domain(_))));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::Domain(_))));
        tape.set_strict(false);
        assert!(tape.log(a).is_ok());
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[5.0, -1.0, 2.0]));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(a).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 4.0]);
        // repeated calls accumulate
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(a).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[-1.0, 0.0]));
        let l = tape.leaky_relu(a, 0.01).unwrap();
        assert_eq!(tape.value(l).data(), &[-0.01, 0.0]);
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        // subgradient at exactly zero is the negative-side slope
        assert_eq!(tape.grad(a).unwrap(), &[0.01, 0.01]);

        let z = tape.constant(t(&[1], &[0.0]));
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(th).data(), &[0.0]);

        let zz = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let sm = tape.softmax(zz, 1).unwrap();
        assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv2d_scalar_kernel_doubles() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);
    }

    #[test]
    fn conv2d_impulse_reproduces_kernel() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let kernel: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.constant(t(&[1, 1, 3, 3], &kernel));
        let y = tape.conv2d(xv, w, 1, 1).unwrap();
        let out = tape.value(y).data();
        // cross-correlation: the impulse response is the kernel flipped
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out[(1 + i) * 5 + 1 + j], kernel[(2 - i) * 3 + (2 - j)]);
            }
        }
    }

    #[test]
    fn conv_transpose_impulse_and_shape() {
        let mut x = Tensor::zeros(&[1, 1, 4, 4]);
        x.data_mut()[5] = 1.0; // (1, 1)
        let kernel: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.constant(t(&[1, 1, 4, 4], &kernel));
        let y = tape.conv_transpose2d(xv, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 8, 8]);
        let out = tape.value(y).data();
        // input (1,1) lands at output origin 1*2 - 1 = 1
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(out[(1 + i) * 8 + 1 + j], kernel[i * 4 + j]);
            }
        }
        let big = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let up = tape.conv_transpose2d(big, w, 2, 1).unwrap();
        assert_eq!(tape.shape(up), &[1, 1, 16, 16]);
    }

    #[test]
    fn conv_rejects_non_positive_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, 1, 2, 2], 3.0));
        let g = tape.constant(t(&[1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let y = tape
            .batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Train)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.5));
        assert!((rm[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_single_sample_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        assert!(tape
            .batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Train)
            .is_err());
        assert!(tape.batchnorm2d(x, g, b, &mut rm, &mut rv, BatchNormMode::Eval).is_ok());
    }
}
