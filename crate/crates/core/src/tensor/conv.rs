// Convolution kernels on raw buffers: im2col/col2im plus GEMM.
//
// Layouts: images are [C, H, W] row-major per sample, weights are
// [F, C, kh, kw] for both conv2d (C -> F) and its transpose (F -> C).
// conv2d is cross-correlation (no kernel flip).

use crate::error::{Error, Result};

pub fn conv2d_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!(
            "non-positive conv output: input {input} + 2*pad {pad} < kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input == 0 {
        return Err(Error::invalid("stride and input must be positive"));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(Error::invalid(format!(
            "non-positive transposed conv output for input {input}, kernel {kernel}, pad {pad}"
        )));
    }
    Ok(full - 2 * pad)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// C = A·B + beta·C, with optional transposed storage of A or B.
///
/// `a` holds an m×k matrix (or k×m when `a_t`), `b` a k×n matrix (or n×k when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length checks above cover every index dgemm touches for
    // these dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of columns back into an image; the adjoint of `im2col`.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `g` describes the (larger) conv2d input side for both directions.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], batch: usize, filters: usize, g: &Geometry) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = filters * g.col_cols();
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            filters,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            &cols,
            false,
            &mut out[b * out_sz..(b + 1) * out_sz],
            0.0,
        );
    }
    out
}

/// Returns (grad_x, grad_w); either is skipped when not requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    batch: usize,
    filters: usize,
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = filters * g.col_cols();
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut gx = need_x.then(|| vec![0.0; batch * in_sz]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..batch {
        let gb = &gout[b * out_sz..(b + 1) * out_sz];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            gemm(filters, ncol, rows, gb, false, &cols, true, gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, filters, ncol, w, true, gb, false, &mut cols, 0.0);
            col2im(&cols, g, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw)
}

/// Transposed convolution from [F, out_h, out_w] up to [C, height, width].
pub(crate) fn conv_transpose2d_forward(x: &[f64], w: &[f64], batch: usize, filters: usize, g: &Geometry) -> Vec<f64> {
    let in_sz = filters * g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        gemm(
            g.col_rows(),
            filters,
            g.col_cols(),
            w,
            true,
            &x[b * in_sz..(b + 1) * in_sz],
            false,
            &mut cols,
            0.0,
        );
        col2im(&cols, g, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    batch: usize,
    filters: usize,
    g: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = filters * g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut gx = need_x.then(|| vec![0.0; batch * in_sz]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..batch {
        im2col(&gout[b * out_sz..(b + 1) * out_sz], g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            gemm(
                filters,
                rows,
                ncol,
                w,
                false,
                &cols,
                false,
                &mut gx[b * in_sz..(b + 1) * in_sz],
                0.0,
            );
        }
        if let Some(gw) = gw.as_mut() {
            gemm(
                filters,
                ncol,
                rows,
                &x[b * in_sz..(b + 1) * in_sz],
                false,
                &cols,
                true,
                gw,
                1.0,
            );
        }
    }
    (gx, gw)
}
