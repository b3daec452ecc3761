//! Forward and backward kernels over raw tensors. The autograd tape calls
//! into these; they hold no graph state.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where `op`
/// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major blocks whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Output extent of a sliding window; the division must be exact.
pub fn window_extent(op: &'static str, input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid(op, "kernel and stride must be positive"));
    }
    let span = input + 2 * padding;
    if span < kernel {
        return Err(Error::invalid(
            op,
            format!("window {kernel} larger than padded input extent {span}"),
        ));
    }
    if (span - kernel) % stride != 0 {
        return Err(Error::invalid(
            op,
            format!(
                "non-integral output extent: ({input} + 2*{padding} - {kernel}) / {stride} + 1"
            ),
        ));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape("conv2d", input, weight));
        };
        if cin != wcin {
            return Err(Error::shape("conv2d", input, weight));
        }
        let oh = window_extent("conv2d", h, kh, stride, padding)?;
        let ow = window_extent("conv2d", w, kw, stride, padding)?;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, padding, oh, ow })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with optional per-output-channel bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let (k, p) = (g.patch(), g.positions());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * p;
    let mut out = vec![0.0; g.n * out_plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..g.n {
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        let ys = &mut out[s * out_plane..(s + 1) * out_plane];
        if let Some(b) = bias {
            for (co, row) in ys.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b.data()[co]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        gemm(g.cout, k, p, 1.0, weight.data(), false, src, false, 1.0, ys);
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::shape("conv2d backward", grad_out.shape(), &[g.n, g.cout, g.oh, g.ow]));
    }
    let (k, p) = (g.patch(), g.positions());
    let in_plane = g.cin * g.h * g.w;
    let out_plane = g.cout * p;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; weight.numel()];
    let mut db = vec![0.0; if with_bias { g.cout } else { 0 }];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = vec![0.0; k * p];
    for s in 0..g.n {
        let xs = &x.data()[s * in_plane..(s + 1) * in_plane];
        let gs = &grad_out.data()[s * out_plane..(s + 1) * out_plane];
        if with_bias {
            for (co, row) in gs.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        gemm(g.cout, p, k, 1.0, gs, false, src, true, 1.0, &mut dw);
        gemm(k, g.cout, p, 1.0, weight.data(), true, gs, false, 0.0, &mut dcols);
        let dxs = &mut dx[s * in_plane..(s + 1) * in_plane];
        if g.is_pointwise() {
            dxs.iter_mut().zip(&dcols).for_each(|(d, v)| *d += v);
        } else {
            col2im(&g, &dcols, dxs);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: if with_bias { Some(Tensor::new(vec![g.cout], db)?) } else { None },
    })
}

fn dense_dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), weight.shape()) {
        (&[n, d], &[wd, m]) if d == wd => Ok((n, d, m)),
        _ => Err(Error::shape("dense", x.shape(), weight.shape())),
    }
}

/// `x[N,D] * w[D,M] + b[M]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d, m) = dense_dims(x, weight)?;
    let mut out = vec![0.0; n * m];
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::shape("dense bias", b.shape(), &[m]));
        }
        out.chunks_mut(m).for_each(|row| row.copy_from_slice(b.data()));
    }
    gemm(n, d, m, 1.0, x.data(), false, weight.data(), false, 1.0, &mut out);
    Tensor::new(vec![n, m], out)
}

pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    with_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (n, d, m) = dense_dims(x, weight)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape("dense backward", grad_out.shape(), &[n, m]));
    }
    let mut dx = vec![0.0; n * d];
    gemm(n, m, d, 1.0, grad_out.data(), false, weight.data(), true, 0.0, &mut dx);
    let mut dw = vec![0.0; d * m];
    gemm(d, n, m, 1.0, x.data(), true, grad_out.data(), false, 0.0, &mut dw);
    let db = with_bias.then(|| {
        let mut db = vec![0.0; m];
        for row in grad_out.data().chunks(m) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        db
    });
    Ok((
        Tensor::new(vec![n, d], dx)?,
        Tensor::new(vec![d, m], dw)?,
        db.map(|v| Tensor::new(vec![m], v)).transpose()?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

fn pool_dims(x: &Tensor, window: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid("pool2d", format!("expected rank 4 input, got {:?}", x.shape())));
    };
    if window > h || window > w {
        return Err(Error::invalid("pool2d", format!("window {window} larger than input {h}x{w}")));
    }
    let oh = window_extent("pool2d", h, window, stride, 0)?;
    let ow = window_extent("pool2d", w, window, stride, 0)?;
    Ok((n, c, h, w, oh, ow))
}

/// Max pooling. Also returns, per output element, the flat input index of the
/// selected maximum; ties go to the lowest flat index.
pub fn max_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_dims(x, window, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

pub fn avg_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = pool_dims(x, window, stride)?;
    let inv = 1.0 / (window * window) as f64;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for ki in 0..window {
                    let row = base + (oi * stride + ki) * w + oj * stride;
                    acc += data[row..row + window].iter().sum::<f64>();
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], window: usize, stride: usize, grad_out: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::invalid("pool2d backward", format!("bad input shape {input_shape:?}")));
    };
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let inv = 1.0 / (window * window) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let v = g[(plane * oh + oi) * ow + oj] * inv;
                for ki in 0..window {
                    let row = base + (oi * stride + ki) * w + oj * stride;
                    d[row..row + window].iter_mut().for_each(|x| *x += v);
                }
            }
        }
    }
    Ok(dx)
}

/// Normalized activations and per-channel inverse standard deviations kept
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch statistics from a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, s) = x.channel_layout("batchnorm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm", x.shape(), gamma.shape()));
    }
    Ok((n, c, s))
}

fn normalize(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    dims: (usize, usize, usize),
) -> Result<(Tensor, NormCache)> {
    let (n, c, s) = dims;
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + s {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + be;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, NormCache { xhat, inv_std: inv_std.to_vec() }))
}

/// Training-mode batch normalization over all axes except the channel axis.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormCache, BatchStats)> {
    let (n, c, s) = check_affine(x, gamma, beta)?;
    let m = n * s;
    if m < 2 {
        return Err(Error::invalid(
            "batchnorm",
            format!("training mode needs at least 2 values per channel, got {m}"),
        ));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            mean[ch] += x.data()[off..off + s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            var[ch] += x.data()[off..off + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let var_unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (out, cache) = normalize(x, gamma, beta, &mean, &inv_std, (n, c, s))?;
    Ok((out, cache, BatchStats { mean, var, var_unbiased }))
}

pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let dims = check_affine(x, gamma, beta)?;
    if running_mean.shape() != [dims.1] || running_var.shape() != [dims.1] {
        return Err(Error::shape("batchnorm running stats", running_mean.shape(), &[dims.1]));
    }
    let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    normalize(x, gamma, beta, running_mean.data(), &inv_std, dims)
}

/// Gradients of batch normalization. `batch_stats` selects the training-mode
/// formula (statistics depend on the input) or the eval-mode one.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &NormCache,
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, s) = grad_out.channel_layout("batchnorm backward")?;
    let m = (n * s) as f64;
    let g = grad_out.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                dgamma[ch] += g[i] * cache.xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + s {
                dx[i] = if batch_stats {
                    scale * (g[i] - dbeta[ch] / m - cache.xhat[i] * dgamma[ch] / m)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Mean cross entropy of `softmax(logits)` against class indices. Returns the
/// loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::invalid("softmax_cross_entropy", format!("expected [N, K] logits, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::invalid("softmax_cross_entropy", format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} out of range [0, {k})")));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (row, (p, &label)) in logits.data().chunks(k).zip(probs.chunks_mut(k).zip(labels)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            z += *pi;
        }
        p.iter_mut().for_each(|v| *v /= z);
        loss += z.ln() - (row[label] - max);
    }
    Ok((loss / n as f64, probs))
}
