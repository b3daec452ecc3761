//! Measurements shared by the module suites and the acceptance target.

use std::collections::{BTreeMap, BTreeSet};

use comprune::autograd::Tape;
use comprune::gates::{sparsity_loss_on_tape, Gate, Granularity, Mode, SparsityConfig, WeightRule};
use comprune::metrics::{count_flops, count_params};
use comprune::network::{Network, BN_EPS};
use comprune::spec::{ModelSpec, NodeKind};
use comprune::tensor::kernels;
use comprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Largest deviation between each engine primitive and its naive oracle over
/// `trials` random shapes up to `4x8x16x16`.
pub fn primitive_oracle_worst(trials: usize, seed: u64) -> BTreeMap<&'static str, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, d: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(d);
    };
    for _ in 0..trials {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        // The engine only accepts windows that tile the padded input exactly.
        let fits = |e: usize| (e + 2 * pad - k) % stride == 0;
        let extent = |rng: &mut ChaCha8Rng| loop {
            let e = rng.gen_range(k.max(2)..=16);
            if fits(e) {
                break e;
            }
        };
        let h = extent(&mut rng);
        let w = extent(&mut rng);
        let f = rng.gen_range(1..=8);
        let x = random_tensor(&[n, c, h, w], &mut rng);

        let wt = random_tensor(&[f, c, k, k], &mut rng);
        let b = random_tensor(&[f], &mut rng);
        let got = kernels::conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        note("conv2d", oracle::max_abs_diff(&got, &oracle::conv2d(&x, &wt, Some(&b), stride, pad)));

        let d = c * h * w;
        let m = rng.gen_range(1..=16);
        let flat = x.reshape(&[n, d]).unwrap();
        let dw = random_tensor(&[d, m], &mut rng);
        let db = random_tensor(&[m], &mut rng);
        note("dense", oracle::max_abs_diff(&kernels::dense(&flat, &dw, Some(&db)).unwrap(), &oracle::dense(&flat, &dw, Some(&db))));

        let win = rng.gen_range(1..=h.min(w).min(4));
        let strides: Vec<usize> = (1..=win).filter(|s| (h - win) % s == 0 && (w - win) % s == 0).collect();
        let ps = strides[rng.gen_range(0..strides.len())];
        note("max_pool", oracle::max_abs_diff(&kernels::max_pool2d(&x, win, ps).unwrap().0, &oracle::pool(&x, win, ps, true)));
        note("avg_pool", oracle::max_abs_diff(&kernels::avg_pool2d(&x, win, ps).unwrap(), &oracle::pool(&x, win, ps, false)));

        let gamma = random_tensor(&[c], &mut rng);
        let beta = random_tensor(&[c], &mut rng);
        let (mean, var) = oracle::channel_moments(&x);
        let (bn, _, _) = kernels::batchnorm_train(&x, &gamma, &beta, BN_EPS).unwrap();
        note("batchnorm_train", oracle::max_abs_diff(&bn, &oracle::batchnorm(&x, gamma.data(), beta.data(), &mean, &var, BN_EPS)));
        let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        let (bn, _) = kernels::batchnorm_eval(&x, &gamma, &beta, &Tensor::from_vec(rm.clone()), &Tensor::from_vec(rv.clone()), BN_EPS).unwrap();
        note("batchnorm_eval", oracle::max_abs_diff(&bn, &oracle::batchnorm(&x, gamma.data(), beta.data(), &rm, &rv, BN_EPS)));

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let r = tape.relu(xv);
        note("relu", oracle::max_abs_diff(tape.value(r), &oracle::relu(&x)));
        let z = tape.leaf(x.zeros_like());
        let s = tape.add(xv, z).unwrap();
        note("add", oracle::max_abs_diff(tape.value(s), &x));
        let scale: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sv = tape.leaf(Tensor::from_vec(scale.clone()));
        let cs = tape.channel_scale(xv, sv).unwrap();
        let expect = Tensor::from_fn(x.shape(), |i| x.data()[i] * scale[(i / (h * w)) % c]);
        note("channel_scale", oracle::max_abs_diff(tape.value(cs), &expect));

        let classes = rng.gen_range(2..=10);
        let logits = random_tensor(&[n, classes], &mut rng).map(|v| 5.0 * v);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let (ce, _) = kernels::softmax_cross_entropy(&logits, &labels).unwrap();
        note("cross_entropy", (ce - oracle::cross_entropy(&logits, &labels)).abs());
    }
    worst
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

fn training_loss(net: &mut Network, x: &Tensor, labels: &[usize], cfg: &SparsityConfig) -> (f64, Option<comprune::autograd::Gradients>, comprune::network::Forward) {
    // Same dropout masks and gate noise for every evaluation.
    net.reseed(0xfd);
    let mut fwd = net.forward(x, Mode::Train).unwrap();
    let ce = fwd.tape.cross_entropy(fwd.logits, labels).unwrap();
    let sp = sparsity_loss_on_tape(&mut fwd.tape, &net.gates, &fwd.gate_phis, cfg).unwrap();
    let loss = fwd.tape.scalar_sum(&[ce, sp]).unwrap();
    let value = fwd.tape.value(loss).item();
    let grads = fwd.tape.backward(loss).ok();
    (value, grads, fwd)
}

/// Compares analytic gradients of cross entropy plus sparsity penalty with
/// central differences on `samples` randomly chosen scalars (weights and gate
/// phis). Returns the relative errors.
pub fn network_fd_errors(net: &mut Network, samples: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![4];
    shape.extend_from_slice(&net.spec.input_shape);
    let x = random_tensor(&shape, &mut rng).map(|v| 2.0 * v);
    let labels: Vec<usize> = (0..4).map(|i| i % net.spec.classes).collect();
    let cfg = SparsityConfig::uniform(0.3);
    let (_, grads, fwd) = training_loss(net, &x, &labels, &cfg);
    let grads = grads.unwrap();

    let mut candidates: Vec<(String, usize)> = Vec::new();
    for (k, t) in &net.weights.params {
        candidates.extend((0..t.numel()).map(|i| (k.clone(), i)));
    }
    for (gi, g) in net.gates.iter().enumerate() {
        candidates.extend((0..g.phi.len()).map(|i| (format!("gate#{gi}"), i)));
    }
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (key, i) = candidates[rng.gen_range(0..candidates.len())].clone();
        let analytic = match key.strip_prefix("gate#") {
            Some(gi) => grads.get(fwd.gate_phis[gi.parse::<usize>().unwrap()]).unwrap().data()[i],
            None => grads.get(fwd.params[&key]).unwrap().data()[i],
        };
        let mut eval = |delta: f64| {
            let slot: &mut f64 = match key.strip_prefix("gate#") {
                Some(gi) => &mut net.gates[gi.parse::<usize>().unwrap()].phi[i],
                None => &mut net.weights.params.get_mut(&key).unwrap().data_mut()[i],
            };
            let orig = *slot;
            *slot = orig + delta;
            let (v, _, _) = training_loss(net, &x, &labels, &cfg);
            let slot: &mut f64 = match key.strip_prefix("gate#") {
                Some(gi) => &mut net.gates[gi.parse::<usize>().unwrap()].phi[i],
                None => &mut net.weights.params.get_mut(&key).unwrap().data_mut()[i],
            };
            *slot = orig;
            v
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        out.push((format!("{key}[{i}]"), relative_error(analytic, numeric, FD_FLOOR)));
    }
    out
}

/// Independent per-gate weight: 1/len for filter gates, 1/count otherwise.
pub fn hand_sparsity(gates: &[Gate], cfg: &SparsityConfig) -> BTreeMap<Granularity, f64> {
    let mut count: BTreeMap<Granularity, usize> = BTreeMap::new();
    for g in gates {
        *count.entry(g.granularity).or_default() += 1;
    }
    let lambda = |g: Granularity| match g {
        Granularity::Filter => cfg.lambda_filter,
        Granularity::Layer => cfg.lambda_layer,
        Granularity::Branch => cfg.lambda_branch,
        Granularity::Block => cfg.lambda_block,
    };
    let mut terms = BTreeMap::new();
    for g in Granularity::ALL {
        if lambda(g) == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for gate in gates.iter().filter(|x| x.granularity == g) {
            let w = match (&cfg.weight_rule, g) {
                (WeightRule::Explicit { weights }, _) => weights.get(&gate.id).copied().unwrap_or(1.0),
                (_, Granularity::Filter) => 1.0 / gate.phi.len() as f64,
                _ => 1.0 / count[&g] as f64,
            };
            let l1: f64 = gate.phi.iter().map(|p| p.abs()).sum();
            sum += w * l1;
        }
        terms.insert(g, lambda(g) * sum);
    }
    terms
}

/// Random gate set over `enabled` plus a config whose lambdas are zero
/// outside `enabled`.
pub fn random_gate_config(enabled: &BTreeSet<Granularity>, rng: &mut impl Rng) -> (Vec<Gate>, SparsityConfig) {
    let mut gates = Vec::new();
    for g in Granularity::ALL {
        for j in 0..rng.gen_range(1..=4) {
            let len = if g == Granularity::Filter { rng.gen_range(1..=16) } else { 1 };
            gates.push(Gate::new(g, format!("s{j}"), (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()));
        }
    }
    let mut cfg = SparsityConfig::uniform(0.0);
    for &g in enabled {
        cfg.set_lambda(g, rng.gen_range(0.01..10.0));
    }
    (gates, cfg)
}

/// Second cost-model implementation: its own shape walk and formulas.
pub fn oracle_cost(spec: &ModelSpec) -> (u64, u64) {
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut pending: Vec<&comprune::spec::NodeSpec> = spec.nodes.iter().collect();
    let (mut params, mut flops) = (0u64, 0u64);
    while !pending.is_empty() {
        let before = pending.len();
        pending.retain(|node| {
            let inputs: Vec<&String> = spec.edges.iter().filter(|e| e.1 == node.id).map(|e| &e.0).collect();
            if inputs.iter().any(|i| !shapes.contains_key(*i)) {
                return true;
            }
            let ins: Vec<Vec<usize>> = inputs.iter().map(|i| shapes[*i].clone()).collect();
            let first = ins.first().cloned().unwrap_or_default();
            let (shape, p, f): (Vec<usize>, u64, u64) = match &node.kind {
                NodeKind::Input => (spec.input_shape.clone(), 0, 0),
                NodeKind::Conv { filters, kernel, stride, padding, bias } => {
                    let (c, h, w) = (first[0], first[1], first[2]);
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    let macs = (filters * c * kernel * kernel * oh * ow) as u64;
                    let b = if *bias { *filters as u64 } else { 0 };
                    (vec![*filters, oh, ow], (filters * c * kernel * kernel) as u64 + b, 2 * macs + b * (oh * ow) as u64)
                }
                NodeKind::Dense { units, bias } => {
                    let d = first[0] as u64;
                    let b = if *bias { *units as u64 } else { 0 };
                    (vec![*units], d * *units as u64 + b, 2 * d * *units as u64 + b)
                }
                NodeKind::Pool { window, stride, .. } => {
                    let s = vec![first[0], (first[1] - window) / stride + 1, (first[2] - window) / stride + 1];
                    let e = s.iter().product::<usize>() as u64;
                    (s, 0, e)
                }
                NodeKind::Batchnorm => {
                    let e = first.iter().product::<usize>() as u64;
                    (first.clone(), 2 * first[0] as u64, 2 * e)
                }
                NodeKind::Relu => {
                    let e = first.iter().product::<usize>() as u64;
                    (first.clone(), 0, e)
                }
                NodeKind::Add { channels, .. } => {
                    let mut s = first.clone();
                    if let Some(c) = channels {
                        s[0] = *c;
                    }
                    let e = s.iter().product::<usize>() as u64;
                    (s, 0, e)
                }
                NodeKind::Flatten => (vec![first.iter().product()], 0, 0),
                NodeKind::Dropout { .. } => (first.clone(), 0, 0),
                NodeKind::Adapter { op } => match op {
                    comprune::spec::AdapterOp::Pool(f) => {
                        let s = vec![first[0], first[1] / f, first[2] / f];
                        let e = s.iter().product::<usize>() as u64;
                        (s, 0, e)
                    }
                    comprune::spec::AdapterOp::Project(c) => {
                        let hw = (first[1] * first[2]) as u64;
                        (vec![*c, first[1], first[2]], (*c * first[0]) as u64, 2 * (*c * first[0]) as u64 * hw)
                    }
                },
            };
            shapes.insert(node.id.clone(), shape);
            params += p;
            flops += f;
            false
        });
        assert!(pending.len() < before, "oracle walk stuck: cycle or dangling edge");
    }
    (params, flops)
}

/// `(engine, oracle)` params and FLOPs.
pub fn cost_pair(spec: &ModelSpec) -> ((u64, u64), (u64, u64)) {
    ((count_params(spec).unwrap(), count_flops(spec).unwrap()), oracle_cost(spec))
}
