//! Forward and backward kernels for the layer kinds the engine supports.
//!
//! Convolution and dense weight gradients are exposed separately from input
//! gradients so a caller can substitute its own weight-gradient computation
//! (the predictive sign path does exactly that). Functions that take an
//! [`EnergyLedger`] charge their arithmetic to it at the given bit width;
//! the bare `*_grad` kernels charge nothing and leave accounting to the
//! caller.

use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial extent: `floor((h + 2*pad - k) / stride) + 1`.
pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    if h + 2 * pad < k {
        return Err(Error::dim("padded input extent vs kernel", k, h + 2 * pad));
    }
    Ok((h + 2 * pad - k) / stride + 1)
}

/// Resolved shapes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::Rank {
                what: "conv input".into(),
                expected: 4,
                shape: x_shape.to_vec(),
            });
        }
        if w_shape.len() != 4 {
            return Err(Error::Rank {
                what: "conv kernel".into(),
                expected: 4,
                shape: w_shape.to_vec(),
            });
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin {
            return Err(Error::dim("conv input channels (axis 1)", wcin, cin));
        }
        if kh != kw {
            return Err(Error::dim("conv kernel width (axis 3)", kh, kw));
        }
        let hout = conv_out_dim(h, kh, stride, pad)?;
        let wout = conv_out_dim(w, kw, stride, pad)?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            hout,
            wout,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.hout, self.wout]
    }

    pub fn w_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }

    /// Multiply-accumulates of the forward pass; each backward product
    /// (input gradient, weight gradient) costs the same.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.cin * self.k * self.k * self.hout * self.wout) as u64
    }

    fn positions(&self) -> usize {
        self.hout * self.wout
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Row-major `c = a * b + beta * c` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the
    // slices, and `c` does not alias `a` or `b`.
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
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Lays input patches out as a `[cin*k*k, n*hout*wout]` matrix.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let np = g.n * p;
    let mut cols = vec![0.0; g.patch() * np];
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.hout {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.w..][..g.w];
                        let dst = &mut dst_row[n * p + oh * g.wout..][..g.wout];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a patch-matrix gradient back onto the input layout.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.positions();
    let np = g.n * p;
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src_row = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.hout {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[n * p + oh * g.wout..][..g.wout];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[ih as usize * g.w + iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` -> `[c, n*p]`.
fn to_channel_major(t: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&t[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c, n*p]` -> `[n, c, p]`.
fn from_channel_major(t: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&t[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub g_x: Tensor,
    /// One gradient per parameter, in the layer's parameter order.
    pub g_w: Vec<Tensor>,
}

/// 2-D convolution without bias. `x` is `N x Cin x H x W`, `w` is
/// `Cout x Cin x K x K`.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<Tensor> {
    let y = conv2d(x, w, stride, pad)?;
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    ledger.macs(g.macs(), bits);
    Ok(y)
}

/// Uncharged convolution.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let np = g.n * g.positions();
    let mut out = vec![0.0; g.cout * np];
    gemm(
        g.cout,
        g.patch(),
        np,
        w.data(),
        (g.patch(), 1),
        &cols,
        (np, 1),
        &mut out,
        (np, 1),
    );
    Tensor::new(
        g.out_shape().to_vec(),
        from_channel_major(&out, g.n, g.cout, g.positions()),
    )
}

/// `g_w[co, ci, kh, kw] = sum_n sum_p x[n, ci, p + (kh, kw)] * g_y[n, co, p]`.
pub fn conv2d_weight_grad(
    x: &Tensor,
    g_y: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w_shape, stride, pad)?;
    g_y.expect_shape("conv output gradient", &g.out_shape())?;
    let cols = im2col(x.data(), &g);
    let p = g.positions();
    let np = g.n * p;
    let gm = to_channel_major(g_y.data(), g.n, g.cout, p);
    let mut gw = vec![0.0; g.cout * g.patch()];
    gemm(
        g.cout,
        np,
        g.patch(),
        &gm,
        (np, 1),
        &cols,
        (1, np),
        &mut gw,
        (g.patch(), 1),
    );
    Tensor::new(g.w_shape().to_vec(), gw)
}

pub fn conv2d_input_grad(
    g_y: &Tensor,
    w: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x_shape, w.shape(), stride, pad)?;
    g_y.expect_shape("conv output gradient", &g.out_shape())?;
    let p = g.positions();
    let np = g.n * p;
    let gm = to_channel_major(g_y.data(), g.n, g.cout, p);
    let mut dcols = vec![0.0; g.patch() * np];
    gemm(
        g.patch(),
        g.cout,
        np,
        w.data(),
        (1, g.patch()),
        &gm,
        (np, 1),
        &mut dcols,
        (np, 1),
    );
    Tensor::new(x_shape.to_vec(), col2im(&dcols, &g))
}

/// Input and weight gradients of a convolution; charges both products.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g_y: &Tensor,
    stride: usize,
    pad: usize,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<GradBundle> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let g_x = conv2d_input_grad(g_y, w, x.shape(), stride, pad)?;
    let g_w = conv2d_weight_grad(x, g_y, w.shape(), stride, pad)?;
    ledger.macs(2 * g.macs(), bits);
    Ok(GradBundle {
        g_x,
        g_w: vec![g_w],
    })
}

fn dense_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank("dense input", 2)?;
    w.expect_rank("dense weight", 2)?;
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, win) = (w.shape()[0], w.shape()[1]);
    if win != din {
        return Err(Error::dim("dense input features (axis 1)", win, din));
    }
    Ok((n, din, dout))
}

/// `y = x W^T + b` with `x: N x in`, `W: out x in`.
pub fn dense_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<Tensor> {
    let (n, din, dout) = dense_dims(x, w)?;
    let mut y = vec![0.0; n * dout];
    gemm(
        n,
        din,
        dout,
        x.data(),
        (din, 1),
        w.data(),
        (1, din),
        &mut y,
        (dout, 1),
    );
    ledger.macs((n * din * dout) as u64, bits);
    if let Some(b) = b {
        b.expect_shape("dense bias", &[dout])?;
        for row in y.chunks_mut(dout) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        ledger.elementwise((n * dout) as u64, 0, 1, bits);
    }
    Tensor::new(vec![n, dout], y)
}

/// `g_W = g_y^T x`.
pub fn dense_weight_grad(x: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    x.expect_rank("dense input", 2)?;
    g_y.expect_rank("dense output gradient", 2)?;
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = g_y.shape()[1];
    if g_y.shape()[0] != n {
        return Err(Error::dim("dense output gradient batch (axis 0)", n, g_y.shape()[0]));
    }
    let mut gw = vec![0.0; dout * din];
    gemm(
        dout,
        n,
        din,
        g_y.data(),
        (1, dout),
        x.data(),
        (din, 1),
        &mut gw,
        (din, 1),
    );
    Tensor::new(vec![dout, din], gw)
}

/// `g_x = g_y W`.
pub fn dense_input_grad(g_y: &Tensor, w: &Tensor) -> Result<Tensor> {
    g_y.expect_rank("dense output gradient", 2)?;
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let n = g_y.shape()[0];
    if g_y.shape()[1] != dout {
        return Err(Error::dim("dense output gradient features (axis 1)", dout, g_y.shape()[1]));
    }
    let mut gx = vec![0.0; n * din];
    gemm(
        n,
        dout,
        din,
        g_y.data(),
        (dout, 1),
        w.data(),
        (din, 1),
        &mut gx,
        (din, 1),
    );
    Tensor::new(vec![n, din], gx)
}

/// Column sums of `g_y`, the bias gradient.
pub fn dense_bias_grad(g_y: &Tensor) -> Tensor {
    let dout = g_y.shape()[1];
    let mut gb = vec![0.0; dout];
    for row in g_y.data().chunks(dout) {
        for (a, b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::from_vec(gb)
}

/// Gradients of a dense layer: `g_w = [g_W, g_b]` (bias last when present).
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    g_y: &Tensor,
    with_bias: bool,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<GradBundle> {
    let (n, din, dout) = dense_dims(x, w)?;
    let g_x = dense_input_grad(g_y, w)?;
    let mut g_w = vec![dense_weight_grad(x, g_y)?];
    ledger.macs(2 * (n * din * dout) as u64, bits);
    if with_bias {
        g_w.push(dense_bias_grad(g_y));
        ledger.elementwise((n * dout) as u64, 0, 1, bits);
    }
    Ok(GradBundle { g_x, g_w })
}

pub fn relu_forward(x: &Tensor, ledger: &mut EnergyLedger, bits: u32) -> Tensor {
    ledger.elementwise(x.len() as u64, 0, 1, bits);
    x.map(|v| v.max(0.0))
}

/// Passes `g_y` where the forward input was positive, zero elsewhere.
pub fn relu_backward(
    x: &Tensor,
    g_y: &Tensor,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<Tensor> {
    ledger.elementwise(x.len() as u64, 0, 1, bits);
    x.zip_map(g_y, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(Error::Rank {
            what: "batchnorm input".into(),
            expected: 4,
            shape: s.to_vec(),
        }),
    }
}

/// Per-channel batch statistics over every axis except axis 1.
pub fn channel_mean_var(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, p) = channel_layout(x)?;
    let count = (n * p) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let d = x.data();
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += d[(ni * c + ci) * p..][..p].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            v += d[(ni * c + ci) * p..][..p]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    Ok((mean, var))
}

/// Values a training-mode batchnorm keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batchnorm using batch statistics.
pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, p) = channel_layout(x)?;
    gamma.expect_shape("batchnorm gamma", &[c])?;
    beta.expect_shape("batchnorm beta", &[c])?;
    let (mean, var) = channel_mean_var(x)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * p;
            for j in off..off + p {
                let xh = (x.data()[j] - mean[ci]) * inv_std[ci];
                x_hat[j] = xh;
                y[j] = gamma.data()[ci] * xh + beta.data()[ci];
            }
        }
    }
    // mean, centred square, normalise, affine
    ledger.elementwise(x.len() as u64, 3, 4, bits);
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode batchnorm using running statistics.
pub fn batchnorm_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (n, c, p) = channel_layout(x)?;
    if running_mean.len() != c {
        return Err(Error::dim("batchnorm running mean", c, running_mean.len()));
    }
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma.data()[ci] / (running_var[ci] + eps).sqrt();
            let shift = beta.data()[ci] - running_mean[ci] * scale;
            for v in &mut y.data_mut()[(ni * c + ci) * p..][..p] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `[g_x, g_gamma, g_beta]` as a bundle.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    g_y: &Tensor,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<GradBundle> {
    let (n, c, p) = channel_layout(g_y)?;
    g_y.expect_shape("batchnorm output gradient", cache.x_hat.shape())?;
    let count = (n * p) as f64;
    let xh = cache.x_hat.data();
    let gy = g_y.data();
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * p;
            for j in off..off + p {
                g_gamma[ci] += gy[j] * xh[j];
                g_beta[ci] += gy[j];
            }
        }
    }
    let mut g_x = vec![0.0; gy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let k = gamma.data()[ci] * cache.inv_std[ci] / count;
            let off = (ni * c + ci) * p;
            for j in off..off + p {
                g_x[j] = k * (count * gy[j] - g_beta[ci] - xh[j] * g_gamma[ci]);
            }
        }
    }
    ledger.elementwise(gy.len() as u64, 4, 4, bits);
    Ok(GradBundle {
        g_x: Tensor::new(g_y.shape().to_vec(), g_x)?,
        g_w: vec![Tensor::from_vec(g_gamma), Tensor::from_vec(g_beta)],
    })
}

/// `N x C x H x W` -> `N x C` spatial means.
pub fn global_avg_pool_forward(x: &Tensor, ledger: &mut EnergyLedger, bits: u32) -> Result<Tensor> {
    x.expect_rank("global average pool input", 4)?;
    let (n, c, p) = channel_layout(x)?;
    let y: Vec<f64> = x.data().chunks(p).map(|s| s.iter().sum::<f64>() / p as f64).collect();
    ledger.elementwise(x.len() as u64, 0, 1, bits);
    Tensor::new(vec![n, c], y)
}

pub fn global_avg_pool_backward(
    x_shape: &[usize],
    g_y: &Tensor,
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<Tensor> {
    let p: usize = x_shape[2..].iter().product();
    g_y.expect_shape("pool output gradient", &x_shape[..2])?;
    let mut g = Vec::with_capacity(g_y.len() * p);
    for &v in g_y.data() {
        g.extend(std::iter::repeat_n(v / p as f64, p));
    }
    ledger.elementwise((g_y.len() * p) as u64, 1, 0, bits);
    Tensor::new(x_shape.to_vec(), g)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    ledger: &mut EnergyLedger,
    bits: u32,
) -> Result<(f64, Tensor)> {
    logits.expect_rank("logits", 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::dim("labels", n, labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, (row, &y)) in logits.data().chunks(k).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::dim("label value", k, y));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for j in 0..k {
            grad[i * k + j] = ((row[j] - m).exp() / z - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    ledger.elementwise((n * k) as u64, 3, 3, bits);
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}
