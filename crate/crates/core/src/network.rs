//! Executable gated networks built from a [`ModelSpec`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{MergeInput, Tape, Var};
use crate::error::{Error, Result};
use crate::gates::{Gate, Granularity, Mode};
use crate::spec::structure::{analyze, Structure};
use crate::spec::{validate, AdapterOp, ModelSpec, NodeKind, ShapeTable};
use crate::tensor::kernels::PoolMode;
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Trainable parameters and non-trainable buffers (batchnorm running stats).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub params: ParamMap,
    pub buffers: ParamMap,
}

impl Weights {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Expected parameter and buffer shapes of every node, keyed
/// `{node}.weight`, `{node}.bias`, `{node}.gamma`, `{node}.beta`,
/// `{node}.running_mean`, `{node}.running_var`.
pub fn weight_shapes(spec: &ModelSpec, shapes: &ShapeTable) -> (BTreeMap<String, Vec<usize>>, BTreeMap<String, Vec<usize>>) {
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for node in &spec.nodes {
        let input = |spec: &ModelSpec| -> Vec<usize> {
            spec.inputs_of(&node.id).first().and_then(|p| shapes.shape(p)).map(<[usize]>::to_vec).unwrap_or_default()
        };
        let id = &node.id;
        match &node.kind {
            NodeKind::Conv { filters, kernel, bias, .. } => {
                params.insert(format!("{id}.weight"), vec![*filters, input(spec)[0], *kernel, *kernel]);
                if *bias {
                    params.insert(format!("{id}.bias"), vec![*filters]);
                }
            }
            NodeKind::Dense { units, bias } => {
                params.insert(format!("{id}.weight"), vec![input(spec)[0], *units]);
                if *bias {
                    params.insert(format!("{id}.bias"), vec![*units]);
                }
            }
            NodeKind::Adapter { op: AdapterOp::Project(c) } => {
                params.insert(format!("{id}.weight"), vec![*c, input(spec)[0], 1, 1]);
            }
            NodeKind::Batchnorm => {
                let c = input(spec)[0];
                params.insert(format!("{id}.gamma"), vec![c]);
                params.insert(format!("{id}.beta"), vec![c]);
                buffers.insert(format!("{id}.running_mean"), vec![c]);
                buffers.insert(format!("{id}.running_var"), vec![c]);
            }
            _ => {}
        }
    }
    (params, buffers)
}

/// He-uniform kernels, zero biases, unit gamma, zero beta, running mean 0
/// and variance 1.
pub fn init_weights(spec: &ModelSpec, shapes: &ShapeTable, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pshapes, bshapes) = weight_shapes(spec, shapes);
    let mut weights = Weights::default();
    // allocation follows node order so adding a node never reshuffles others' draws
    for node in &spec.nodes {
        for suffix in ["weight", "bias", "gamma", "beta"] {
            let key = format!("{}.{suffix}", node.id);
            let Some(shape) = pshapes.get(&key) else { continue };
            let t = match suffix {
                "weight" => {
                    let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
                }
                "gamma" => Tensor::ones(shape),
                _ => Tensor::zeros(shape),
            };
            weights.params.insert(key, t);
        }
    }
    for (key, shape) in bshapes {
        let t = if key.ends_with("running_var") { Tensor::ones(&shape) } else { Tensor::zeros(&shape) };
        weights.buffers.insert(key, t);
    }
    weights
}

/// `coefficient * sum(w^2)` over conv, dense and adapter kernels.
pub fn l2_penalty(params: &ParamMap, coefficient: f64) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    coefficient * params.iter().filter(|(k, _)| k.ends_with(".weight")).map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
}

#[derive(Debug, Clone)]
struct Step {
    node: usize,
    inputs: Vec<usize>,
    filter_gate: Option<usize>,
    /// Structure gates per input position of an add, applied in order.
    input_gates: Vec<Vec<usize>>,
}

/// Result of one forward pass: the tape and the handles needed to read
/// gradients back.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub params: BTreeMap<String, Var>,
    pub gate_phis: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub shapes: ShapeTable,
    pub structure: Structure,
    pub weights: Weights,
    pub gates: Vec<Gate>,
    steps: Vec<Step>,
    output: usize,
    rng: ChaCha8Rng,
}

impl Network {
    /// Fresh parameters from `seed`, with `gates` bound to their attachments.
    pub fn instantiate(spec: &ModelSpec, gates: Vec<Gate>, seed: u64) -> Result<Self> {
        let shapes = validate(spec)?;
        let weights = init_weights(spec, &shapes, seed);
        Self::from_parts(spec, weights, gates, seed)
    }

    pub fn from_parts(spec: &ModelSpec, weights: Weights, gates: Vec<Gate>, seed: u64) -> Result<Self> {
        let shapes = validate(spec)?;
        let structure = analyze(spec)?;
        let (pshapes, bshapes) = weight_shapes(spec, &shapes);
        for (expected, got, what) in [(&pshapes, &weights.params, "parameter"), (&bshapes, &weights.buffers, "buffer")] {
            for (key, shape) in expected {
                match got.get(key) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => return Err(Error::shape("network", shape, t.shape())),
                    None => return Err(Error::invalid("network", format!("missing {what} '{key}'"))),
                }
            }
            if let Some(extra) = got.keys().find(|k| !expected.contains_key(*k)) {
                return Err(Error::invalid("network", format!("unexpected {what} '{extra}'")));
            }
        }
        let index: BTreeMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let mut steps: Vec<Step> = shapes
            .order
            .iter()
            .map(|id| {
                let inputs: Vec<usize> = spec.inputs_of(id).iter().map(|p| index[p]).collect();
                let input_gates = vec![Vec::new(); inputs.len()];
                Step { node: index[id.as_str()], inputs, filter_gate: None, input_gates }
            })
            .collect();
        let step_of: BTreeMap<usize, usize> = steps.iter().enumerate().map(|(s, st)| (st.node, s)).collect();

        let mut seen = std::collections::BTreeSet::new();
        for (gi, gate) in gates.iter().enumerate() {
            if !seen.insert((gate.granularity, gate.attachment.clone())) {
                return Err(Error::invalid("instantiate", format!("two {} gates attached to '{}'", gate.granularity, gate.attachment)));
            }
            match gate.granularity {
                Granularity::Filter => {
                    let stack = structure.stack(&gate.attachment).ok_or_else(|| {
                        Error::invalid("instantiate", format!("filter gate '{}' has no prunable conv to attach to", gate.id))
                    })?;
                    if gate.phi.len() != stack.filters {
                        return Err(Error::shape("instantiate", &[stack.filters], &[gate.phi.len()]));
                    }
                    steps[step_of[&index[stack.exit.as_str()]]].filter_gate = Some(gi);
                }
                g => {
                    let shortcut = structure.site(g, &gate.attachment).and_then(|s| s.shortcut.as_ref()).ok_or_else(|| {
                        Error::invalid("instantiate", format!("gate '{}' has no {g} with a shortcut to attach to", gate.id))
                    })?;
                    if gate.phi.len() != 1 {
                        return Err(Error::shape("instantiate", &[1], &[gate.phi.len()]));
                    }
                    let step = &mut steps[step_of[&index[shortcut.merge.as_str()]]];
                    for &pos in &shortcut.gated_inputs {
                        step.input_gates[pos].push(gi);
                    }
                }
            }
        }
        let output = index[shapes.output.as_str()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self { spec: spec.clone(), shapes, structure, weights, gates, steps, output, rng })
    }

    /// Restarts the stream used for dropout masks and gate noise.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(1);
    }

    pub fn gate(&self, granularity: Granularity, attachment: &str) -> Option<&Gate> {
        self.gates.iter().find(|g| g.granularity == granularity && g.attachment == attachment)
    }

    /// Records a forward pass. In training mode batchnorm normalizes with
    /// batch statistics and updates its running estimates, dropout is active
    /// and gate noise (if configured) is drawn.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Forward> {
        let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
        expected.extend_from_slice(&self.spec.input_shape);
        if x.shape() != expected.as_slice() {
            return Err(Error::shape("forward", &expected, x.shape()));
        }
        let mut tape = Tape::new();
        let mut params: BTreeMap<String, Var> = BTreeMap::new();
        let mut gate_phis = Vec::with_capacity(self.gates.len());
        let mut gate_vals = Vec::with_capacity(self.gates.len());
        for gate in &self.gates {
            let phi = tape.leaf(Tensor::new(vec![gate.phi.len()], gate.phi.clone())?);
            let noise = gate.draw_noise(mode, &mut self.rng);
            gate_vals.push(tape.gate_value(phi, noise.as_deref())?);
            gate_phis.push(phi);
        }
        let mut outs: Vec<Option<Var>> = vec![None; self.spec.nodes.len()];
        let mut param = |tape: &mut Tape, key: String, weights: &Weights| -> Var {
            *params.entry(key.clone()).or_insert_with(|| tape.leaf(weights.params[&key].clone()))
        };
        for step in &self.steps {
            let node = &self.spec.nodes[step.node];
            let id = &node.id;
            let input = |k: usize| outs[step.inputs[k]].expect("topological order");
            let out = match &node.kind {
                NodeKind::Input => tape.leaf(x.clone()),
                NodeKind::Conv { stride, padding, bias, .. } => {
                    let w = param(&mut tape, format!("{id}.weight"), &self.weights);
                    let b = bias.then(|| param(&mut tape, format!("{id}.bias"), &self.weights));
                    tape.conv2d(input(0), w, b, *stride, *padding)?
                }
                NodeKind::Dense { bias, .. } => {
                    let w = param(&mut tape, format!("{id}.weight"), &self.weights);
                    let b = bias.then(|| param(&mut tape, format!("{id}.bias"), &self.weights));
                    tape.dense(input(0), w, b)?
                }
                NodeKind::Pool { mode: PoolMode::Max, window, stride } => tape.max_pool(input(0), *window, *stride)?,
                NodeKind::Pool { mode: PoolMode::Avg, window, stride } => tape.avg_pool(input(0), *window, *stride)?,
                NodeKind::Batchnorm => {
                    let gamma = param(&mut tape, format!("{id}.gamma"), &self.weights);
                    let beta = param(&mut tape, format!("{id}.beta"), &self.weights);
                    let (mk, vk) = (format!("{id}.running_mean"), format!("{id}.running_var"));
                    match mode {
                        Mode::Train => {
                            let (out, stats) = tape.batchnorm_train(input(0), gamma, beta, BN_EPS)?;
                            let rm = self.weights.buffers.get_mut(&mk).expect("checked at construction");
                            rm.data_mut().iter_mut().zip(&stats.mean).for_each(|(r, m)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
                            let rv = self.weights.buffers.get_mut(&vk).expect("checked at construction");
                            rv.data_mut()
                                .iter_mut()
                                .zip(&stats.var_unbiased)
                                .for_each(|(r, v)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
                            out
                        }
                        Mode::Eval => {
                            let (rm, rv) = (&self.weights.buffers[&mk], &self.weights.buffers[&vk]);
                            tape.batchnorm_eval(input(0), gamma, beta, rm, rv, BN_EPS)?
                        }
                    }
                }
                NodeKind::Relu => tape.relu(input(0)),
                NodeKind::Add { channels, channel_maps } => {
                    let mut merged = Vec::with_capacity(step.inputs.len());
                    for (pos, gates) in step.input_gates.iter().enumerate() {
                        let mut v = input(pos);
                        for &g in gates {
                            v = tape.scalar_scale(v, gate_vals[g])?;
                        }
                        let channel_map = channel_maps.get(pos).cloned().flatten();
                        merged.push(MergeInput { input: v, channel_map });
                    }
                    let out_channels = channels.unwrap_or_else(|| self.shapes.shapes[id][0]);
                    tape.merge_add(merged, out_channels)?
                }
                NodeKind::Flatten => {
                    let v = input(0);
                    let shape = tape.value(v).shape();
                    let flat = [shape[0], shape[1..].iter().product()];
                    tape.reshape(v, &flat)?
                }
                NodeKind::Dropout { rate } => match mode {
                    Mode::Train if *rate > 0.0 => {
                        let v = input(0);
                        let keep = 1.0 - rate;
                        let n = tape.value(v).numel();
                        let mask = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                        tape.dropout(v, mask)?
                    }
                    _ => input(0),
                },
                NodeKind::Adapter { op: AdapterOp::Pool(f) } => tape.avg_pool(input(0), *f, *f)?,
                NodeKind::Adapter { op: AdapterOp::Project(_) } => {
                    let w = param(&mut tape, format!("{id}.weight"), &self.weights);
                    tape.conv2d(input(0), w, None, 1, 0)?
                }
            };
            let out = match step.filter_gate {
                Some(g) => tape.channel_scale(out, gate_vals[g])?,
                None => out,
            };
            outs[step.node] = Some(out);
        }
        let logits = outs[self.output].expect("output evaluated");
        Ok(Forward { tape, logits, params, gate_phis })
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: &Tensor) -> Result<Tensor> {
        let fwd = self.forward(x, Mode::Eval)?;
        Ok(fwd.tape.value(fwd.logits).clone())
    }

    /// Eval-mode logits computed in batches of `batch` samples.
    pub fn predict_batched(&mut self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.shape()[0];
        let batch = batch.max(1);
        let mut data = Vec::with_capacity(n * self.spec.classes);
        for start in (0..n).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            data.extend(self.predict(&x.select(0, &idx)?)?.into_data());
        }
        Tensor::new(vec![n, self.spec.classes], data)
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&mut self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if x.shape()[0] != labels.len() {
            return Err(Error::shape("accuracy", x.shape(), &[labels.len()]));
        }
        let logits = self.predict_batched(x, 256)?;
        Ok(accuracy_from_logits(&logits, labels))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = logits.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    correct as f64 / labels.len().max(1) as f64
}
