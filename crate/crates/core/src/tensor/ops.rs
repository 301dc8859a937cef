//! Forward kernels. The tape calls these and records how to undo them.

use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths were checked above and the strides address
    // exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_rows")?;
    x.ensure_finite("softmax_rows")?;
    let mut out = x.to_vec();
    for row in out.chunks_mut(n).take(m) {
        softmax_in_place(row);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn elementwise(x: &Tensor, f: Activation) -> Tensor {
    x.map(|v| f.apply(v))
}

pub fn relu(x: &Tensor) -> Tensor {
    elementwise(x, Activation::Relu)
}

pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    elementwise(x, Activation::Sigmoid)
}

/// Output extent of a convolution along one axis, if the kernel fits.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution, shared by forward and backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], filters: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            _ => return Err(Error::dim("conv2d", input, filters)),
        };
        let (c_out, fc, kh, kw) = match filters {
            &[o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::dim("conv2d", input, filters)),
        };
        if fc != c_in || kh != kw {
            return Err(Error::dim("conv2d", input, filters));
        }
        let h_out = conv_out_len(h, kh, stride, pad);
        let w_out = conv_out_len(w, kw, stride, pad);
        match (h_out, w_out) {
            (Some(h_out), Some(w_out)) => Ok(Self {
                c_in,
                h,
                w,
                c_out,
                k: kh,
                stride,
                pad,
                h_out,
                w_out,
            }),
            _ => Err(Error::dim("conv2d", input, filters)),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds the input into a `patch_len x out_positions` matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let npos = self.out_positions();
        let mut cols = vec![0.0; self.patch_len() * npos];
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back.
    pub fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let npos = self.out_positions();
        for c in 0..self.c_in {
            let plane = &mut grad_input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of a `C_in x H x W` input with `C_out x C_in x k x k`
/// filters and an optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), filters.shape(), stride, padding)?;
    let cols = g.im2col(input.data());
    Ok(conv2d_from_cols(&g, &cols, filters, bias)?)
}

pub(crate) fn conv2d_from_cols(
    g: &ConvGeom,
    cols: &[f64],
    filters: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let npos = g.out_positions();
    let mut out = vec![0.0; g.c_out * npos];
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::dim("conv2d bias", b.shape(), &[g.c_out]));
        }
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * npos..(o + 1) * npos].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(
        g.c_out,
        g.patch_len(),
        npos,
        filters.data(),
        false,
        cols,
        false,
        &mut out,
        beta,
    );
    Ok(Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out))
}

/// Per-column affine-activation chain. `x` is `in x L` (or a length-`in`
/// vector); each layer is `(W [out x in], b [out])`. The activation is
/// applied between layers, never after the last one.
pub fn mlp_forward(
    x: &Tensor,
    layers: &[(Tensor, Tensor)],
    activation: Activation,
) -> Result<Tensor> {
    let vector_input = x.rank() == 1;
    let mut h = if vector_input {
        x.reshape([x.len(), 1])?
    } else {
        x.clone()
    };
    for (i, (w, b)) in layers.iter().enumerate() {
        let (out_dim, _) = w.dims2("mlp_forward")?;
        if b.len() != out_dim {
            return Err(Error::dim("mlp_forward bias", b.shape(), w.shape()));
        }
        let mut z = matmul(w, &h)?.into_vec();
        let cols = z.len() / out_dim;
        for (r, &bv) in b.data().iter().enumerate() {
            z[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
        if i + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = activation.apply(*v));
        }
        h = Tensor::from_parts(vec![out_dim, cols], z);
    }
    if vector_input {
        let n = h.len();
        h = h.reshape([n])?;
    }
    Ok(h)
}
