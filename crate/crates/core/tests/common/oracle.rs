//! Naive-loop reference implementations, written independently of the
//! engine's im2col/GEMM kernels.

use comprune::tensor::Tensor;

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (f, _, k, _) = dims4(w);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for s in 0..n {
        for o in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ch) * h + y as usize) * wd + xx as usize];
                                let wv = w.data()[((o * c + ch) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((s * f + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// `x[N,D] * w[D,M] + b`.
pub fn dense(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for t in 0..d {
                acc += x.data()[i * d + t] * w.data()[t * m + j];
            }
            out.data_mut()[i * m + j] = acc;
        }
    }
    out
}

pub fn pool(x: &Tensor, window: usize, stride: usize, max: bool) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let vals: Vec<f64> = (0..window * window)
                    .map(|q| x.data()[(p * h + i * stride + q / window) * w + j * stride + q % window])
                    .collect();
                let v = if max { vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) } else { vals.iter().sum::<f64>() / vals.len() as f64 };
                out.data_mut()[(p * oh + i) * ow + j] = v;
            }
        }
    }
    out
}

/// Per-channel two-pass mean and biased variance.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(x);
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|s| (0..h * w).map(move |q| (s, q))).map(|(s, q)| x.data()[(s * c + ch) * h * w + q]).collect();
        mean[ch] = vals.iter().sum::<f64>() / m;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / m;
    }
    (mean, var)
}

pub fn batchnorm(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            for q in 0..h * w {
                let i = (s * c + ch) * h * w + q;
                out.data_mut()[i] = gamma[ch] * (x.data()[i] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Mean of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
