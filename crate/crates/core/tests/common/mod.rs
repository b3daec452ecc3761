#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use std::collections::BTreeSet;

use comprune::gates::{init_gates, Gate, Granularity, Thresholds};
use comprune::network::Network;
use comprune::spec::shortcuts::{insert_shortcuts, MismatchPolicy};
use comprune::spec::structure::analyze;
use comprune::spec::ModelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spec with shortcuts for every structural granularity (skip policy).
pub fn scaffolded(spec: &ModelSpec) -> ModelSpec {
    let mut s = spec.clone();
    for g in [Granularity::Layer, Granularity::Branch, Granularity::Block] {
        s = insert_shortcuts(&s, g, MismatchPolicy::Skip).unwrap();
    }
    s
}

pub fn all_granularities() -> BTreeSet<Granularity> {
    Granularity::ALL.into_iter().collect()
}

/// Gated network with randomized batchnorm statistics and affine terms so
/// that equivalence checks are not trivially satisfied.
pub fn gated_network(spec: &ModelSpec, enabled: &BTreeSet<Granularity>, seed: u64) -> Network {
    let structure = analyze(spec).unwrap();
    let gates = init_gates(spec, &structure, enabled, seed);
    let mut net = Network::instantiate(spec, gates, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (k, t) in net.weights.params.iter_mut() {
        if k.ends_with(".gamma") || k.ends_with(".beta") || k.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    for (k, t) in net.weights.buffers.iter_mut() {
        let range = if k.ends_with("running_var") { 0.5..2.0 } else { -0.5..0.5 };
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
    }
    net
}

/// Random {0, 1} gate values; each entry is zero with probability `p_zero`.
pub fn random_binary(gates: &[Gate], p_zero: f64, rng: &mut impl Rng) -> Vec<Gate> {
    gates
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.phi.iter_mut().for_each(|p| *p = if rng.gen::<f64>() < p_zero { 0.0 } else { 1.0 });
            g
        })
        .collect()
}

pub fn half_thresholds() -> Thresholds {
    Granularity::ALL.into_iter().map(|g| (g, 0.5)).collect()
}

/// `input -> (conv -> bn -> relu)* -> gap -> flatten -> fc`. Each entry is
/// `(filters, stride)`; convs have kernel `stride + 2` and padding 1 (so the
/// spatial size divides exactly) and are marked prunable.
pub fn chain_spec(input_shape: &[usize], convs: &[(usize, usize)], classes: usize) -> ModelSpec {
    use comprune::spec::{Edge, NodeKind, NodeSpec};
    use comprune::tensor::kernels::PoolMode;
    let mut nodes = vec![NodeSpec::new("input", NodeKind::Input)];
    let (mut h, mut w) = (input_shape[1], input_shape[2]);
    for (i, &(filters, stride)) in convs.iter().enumerate() {
        let i = i + 1;
        nodes.push(NodeSpec::new(format!("conv{i}"), NodeKind::Conv { filters, kernel: stride + 2, stride, padding: 1, bias: true }).prunable());
        nodes.push(NodeSpec::new(format!("bn{i}"), NodeKind::Batchnorm));
        nodes.push(NodeSpec::new(format!("relu{i}"), NodeKind::Relu));
        h /= stride;
        w /= stride;
    }
    nodes.push(NodeSpec::new("gap", NodeKind::Pool { mode: PoolMode::Avg, window: h.min(w), stride: h.min(w) }));
    nodes.push(NodeSpec::new("flat", NodeKind::Flatten));
    nodes.push(NodeSpec::new("fc", NodeKind::Dense { units: classes, bias: true }));
    let edges = nodes.windows(2).map(|p| Edge::new(&p[0].id, &p[1].id)).collect();
    ModelSpec { name: "chain".into(), input_shape: input_shape.to_vec(), classes, nodes, edges, branches: vec![], blocks: vec![] }
}
