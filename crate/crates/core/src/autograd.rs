//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one entry holding its output value and whatever it
//! needs for the backward pass. Entries are only ever appended, so inputs
//! always precede their consumers and a reverse sweep is a valid reverse
//! topological order.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, NormCache};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One summand of a channel-scattering add: `scale * input`, with input
/// channel `c` landing on output channel `map[c]` (identity when `None`).
#[derive(Debug, Clone)]
pub struct MergeInput {
    pub input: Var,
    pub channel_map: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Dense { x: Var, w: Var, b: Option<Var> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, window: usize, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache, batch_stats: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MergeAdd { inputs: Vec<MergeInput> },
    ChannelScale { x: Var, scale: Var },
    ScalarScale { x: Var, scale: Var },
    GateValue { phi: Var, pass: Vec<bool> },
    Reshape { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SumSquares { x: Var },
    WeightedAbsSum { x: Var, weight: f64 },
    Sum { x: Var },
    ScalarSum { inputs: Vec<Var> },
}

struct Entry {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` if the loss does
    /// not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn channel_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.entries[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), window, stride)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool2d(self.value(x), window, stride)?;
        Ok(self.push(out, Op::AvgPool { x, window, stride }))
    }

    /// Training-mode batch normalization; returns the output and the batch
    /// statistics so the caller can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, kernels::BatchStats)> {
        let (out, cache, stats) =
            kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok((self.push(out, Op::BatchNorm { x, gamma, beta, cache, batch_stats: true }), stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let (out, cache) = kernels::batchnorm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, cache, batch_stats: false }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Sums inputs into an output with `out_channels` channels. Inputs without
    /// a channel map must already have `out_channels` channels.
    pub fn merge_add(&mut self, inputs: Vec<MergeInput>, out_channels: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("merge_add", "no inputs"))?;
        let base = self.value(first.input).shape().to_vec();
        let (n, _, s) = channel_dims(&base)
            .ok_or_else(|| Error::invalid("merge_add", format!("unsupported rank {:?}", base)))?;
        let mut out_shape = base.clone();
        out_shape[1] = out_channels;
        let mut out = Tensor::zeros(&out_shape);
        for mi in &inputs {
            let v = self.value(mi.input);
            let (vn, vc, vs) = channel_dims(v.shape()).ok_or_else(|| Error::shape("merge_add", v.shape(), &out_shape))?;
            if vn != n || vs != s || v.shape()[2..] != out_shape[2..] {
                return Err(Error::shape("merge_add", v.shape(), &out_shape));
            }
            match &mi.channel_map {
                None if vc != out_channels => return Err(Error::shape("merge_add", v.shape(), &out_shape)),
                Some(map) if map.len() != vc || map.iter().any(|&m| m >= out_channels) => {
                    return Err(Error::invalid("merge_add", format!("channel map {map:?} does not fit {vc} -> {out_channels}")));
                }
                _ => {}
            }
            let od = out.data_mut();
            for b in 0..n {
                for c in 0..vc {
                    let oc = mi.channel_map.as_ref().map_or(c, |m| m[c]);
                    let src = &v.data()[(b * vc + c) * s..(b * vc + c + 1) * s];
                    let dst = &mut od[(b * out_channels + oc) * s..(b * out_channels + oc + 1) * s];
                    dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            }
        }
        Ok(self.push(out, Op::MergeAdd { inputs }))
    }

    /// Multiplies channel `c` of `x` by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(scale));
        let (n, c, s) = channel_dims(vx.shape())
            .ok_or_else(|| Error::invalid("channel_scale", format!("unsupported rank {:?}", vx.shape())))?;
        if vs.shape() != [c] {
            return Err(Error::shape("channel_scale", vx.shape(), vs.shape()));
        }
        let mut out = vx.clone();
        for b in 0..n {
            for ch in 0..c {
                let g = vs.data()[ch];
                out.data_mut()[(b * c + ch) * s..(b * c + ch + 1) * s].iter_mut().for_each(|v| *v *= g);
            }
        }
        Ok(self.push(out, Op::ChannelScale { x, scale }))
    }

    /// Multiplies every element of `x` by the one-element `scale`.
    pub fn scalar_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let vs = self.value(scale);
        if vs.numel() != 1 {
            return Err(Error::invalid("scalar_scale", format!("scale has shape {:?}", vs.shape())));
        }
        let g = vs.item();
        let out = self.value(x).map(|v| v * g);
        Ok(self.push(out, Op::ScalarScale { x, scale }))
    }

    /// `clamp(phi + noise, 0, 1)`. The gradient passes through where the
    /// pre-clamp value lies in the closed interval.
    pub fn gate_value(&mut self, phi: Var, noise: Option<&[f64]>) -> Result<Var> {
        let p = self.value(phi);
        if let Some(noise) = noise {
            if noise.len() != p.numel() {
                return Err(Error::invalid("gate_value", "noise length differs from gate length"));
            }
        }
        let pre: Vec<f64> = p
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + noise.map_or(0.0, |n| n[i]))
            .collect();
        let pass = pre.iter().map(|&v| (0.0..=1.0).contains(&v)).collect();
        let out = Tensor::new(p.shape().to_vec(), pre.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        Ok(self.push(out, Op::GateValue { phi, pass }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if mask.len() != vx.numel() {
            return Err(Error::invalid("dropout", "mask length differs from input"));
        }
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x })
    }

    /// `weight * sum(|x|)`.
    pub fn weighted_abs_sum(&mut self, x: Var, weight: f64) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(weight * s), Op::WeightedAbsSum { x, weight })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Sum of one-element values; an empty list yields a constant zero.
    pub fn scalar_sum(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &v in inputs {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::invalid("scalar_sum", format!("operand has shape {:?}", t.shape())));
            }
            s += t.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::ScalarSum { inputs: inputs.to_vec() }))
    }

    /// Accumulates d(loss)/d(value) for every value the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &entry.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, padding } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *padding, b.is_some())?;
                    acc(&mut grads, *x, cg.input)?;
                    acc(&mut grads, *w, cg.weight)?;
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        acc(&mut grads, *b, db)?;
                    }
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = kernels::dense_backward(self.value(*x), self.value(*w), &g, b.is_some())?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *w, dw)?;
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(&mut grads, *b, db)?;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let dx = kernels::max_pool2d_backward(self.value(*x).shape(), argmax, &g)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::AvgPool { x, window, stride } => {
                    let dx = kernels::avg_pool2d_backward(self.value(*x).shape(), *window, *stride, &g)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::BatchNorm { x, gamma, beta, cache, batch_stats } => {
                    let (dx, dg, db) = kernels::batchnorm_backward(&g, self.value(*gamma), cache, *batch_stats)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *gamma, dg)?;
                    acc(&mut grads, *beta, db)?;
                }
                Op::Relu { x } => {
                    let vx = self.value(*x);
                    let data = g.data().iter().zip(vx.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g.clone())?;
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(vb.data()).map(|(g, v)| g * v).collect();
                    let db = g.data().iter().zip(va.data()).map(|(g, v)| g * v).collect();
                    acc(&mut grads, *a, Tensor::new(g.shape().to_vec(), da)?)?;
                    acc(&mut grads, *b, Tensor::new(g.shape().to_vec(), db)?)?;
                }
                Op::MergeAdd { inputs } => {
                    let (n, oc, s) = channel_dims(g.shape()).expect("merge output rank checked in forward");
                    for mi in inputs {
                        let shape = self.value(mi.input).shape().to_vec();
                        let vc = shape[1];
                        let mut d = Tensor::zeros(&shape);
                        for b in 0..n {
                            for c in 0..vc {
                                let o = mi.channel_map.as_ref().map_or(c, |m| m[c]);
                                let src = &g.data()[(b * oc + o) * s..(b * oc + o + 1) * s];
                                d.data_mut()[(b * vc + c) * s..(b * vc + c + 1) * s].copy_from_slice(src);
                            }
                        }
                        acc(&mut grads, mi.input, d)?;
                    }
                }
                Op::ChannelScale { x, scale } => {
                    let (vx, vs) = (self.value(*x), self.value(*scale));
                    let (n, c, s) = channel_dims(vx.shape()).expect("checked in forward");
                    let mut dx = g.clone();
                    let mut ds = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
                            ds[ch] += g.data()[range.clone()].iter().zip(&vx.data()[range.clone()]).map(|(a, b)| a * b).sum::<f64>();
                            dx.data_mut()[range].iter_mut().for_each(|v| *v *= vs.data()[ch]);
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *scale, Tensor::new(vec![c], ds)?)?;
                }
                Op::ScalarScale { x, scale } => {
                    let (vx, vs) = (self.value(*x), self.value(*scale));
                    let ds: f64 = g.data().iter().zip(vx.data()).map(|(a, b)| a * b).sum();
                    let k = vs.item();
                    acc(&mut grads, *x, g.map(|v| v * k))?;
                    acc(&mut grads, *scale, Tensor::full(vs.shape(), ds))?;
                }
                Op::GateValue { phi, pass } => {
                    let data = g.data().iter().zip(pass).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
                    acc(&mut grads, *phi, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape)?)?;
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = g.item() / n as f64;
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_mut(k).zip(labels) {
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    acc(&mut grads, *logits, Tensor::new(shape, d)?)?;
                }
                Op::SumSquares { x } => {
                    let k = 2.0 * g.item();
                    acc(&mut grads, *x, self.value(*x).map(|v| k * v))?;
                }
                Op::WeightedAbsSum { x, weight } => {
                    let k = weight * g.item();
                    acc(&mut grads, *x, self.value(*x).map(|v| k * v.signum() * (v != 0.0) as u8 as f64))?;
                }
                Op::Sum { x } => {
                    let k = g.item();
                    acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), k))?;
                }
                Op::ScalarSum { inputs } => {
                    for &v in inputs {
                        let shape = self.value(v).shape().to_vec();
                        acc(&mut grads, v, Tensor::full(&shape, g.item()))?;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
