//! Physical removal of pruned filters and structures.
//!
//! Surgery works on channel liveness: a removed filter leaves its stack's
//! output channel identically zero, zero channels stay zero through relu,
//! pooling and dropout, and every consumer that multiplies by weights simply
//! drops the matching input slice. Adds merging partially pruned inputs keep
//! a per-input channel map so surviving channels still line up.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{Gate, Granularity, Thresholds};
use crate::network::{weight_shapes, Network, Weights};
use crate::spec::structure::{analyze, Site, Structure};
use crate::spec::{validate, validate_lenient, ModelSpec, NodeKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Conv id -> removed output channels, ascending.
    pub filters: BTreeMap<String, Vec<usize>>,
    /// Conv id -> channels kept only to avoid severing the graph; their
    /// weights are zeroed so the stack still outputs zero there.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub zeroed: BTreeMap<String, Vec<usize>>,
    pub layers: BTreeSet<String>,
    pub branches: BTreeSet<String>,
    pub blocks: BTreeSet<String>,
    /// Artificial shortcut nodes deleted when scaffolding is not kept.
    pub scaffold: BTreeSet<String>,
    pub thresholds: Thresholds,
}

impl PruningPlan {
    pub fn is_empty(&self) -> bool {
        self.filters.is_empty() && self.zeroed.is_empty() && self.layers.is_empty() && self.branches.is_empty() && self.blocks.is_empty()
    }

    pub fn structures(&self, granularity: Granularity) -> &BTreeSet<String> {
        match granularity {
            Granularity::Layer => &self.layers,
            Granularity::Branch => &self.branches,
            Granularity::Block => &self.blocks,
            Granularity::Filter => panic!("filters are not structures"),
        }
    }

    fn structures_mut(&mut self, granularity: Granularity) -> &mut BTreeSet<String> {
        match granularity {
            Granularity::Layer => &mut self.layers,
            Granularity::Branch => &mut self.branches,
            Granularity::Block => &mut self.blocks,
            Granularity::Filter => panic!("filters are not structures"),
        }
    }

    pub fn removed_filter_count(&self) -> usize {
        self.filters.values().map(Vec::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn removed_sites<'a>(structure: &'a Structure, plan: &PruningPlan) -> Result<Vec<&'a Site>> {
    let mut out = Vec::new();
    for g in [Granularity::Layer, Granularity::Branch, Granularity::Block] {
        for id in plan.structures(g) {
            let site = structure
                .site(g, id)
                .ok_or_else(|| Error::Surgery(format!("plan removes unknown {g} '{id}'")))?;
            if site.shortcut.is_none() {
                return Err(Error::Surgery(format!("{g} '{id}' is unprunable without shortcut")));
            }
            out.push(site);
        }
    }
    Ok(out)
}

/// Artificial nodes that only exist to carry shortcuts which survive the
/// structure removals of `plan`.
fn scaffold_of(spec: &ModelSpec, structure: &Structure, removed: &BTreeSet<String>) -> BTreeSet<String> {
    let mut scaffold = BTreeSet::new();
    let mut seen_merges = BTreeSet::new();
    for site in &structure.sites {
        let Some(sc) = &site.shortcut else { continue };
        let artificial = spec.node(&sc.merge).is_some_and(|n| n.artificial);
        if !artificial || removed.contains(&sc.merge) || !seen_merges.insert(sc.merge.clone()) {
            continue;
        }
        let gated_alive = sc.gated_inputs.iter().any(|&p| {
            let producer = spec.inputs_of(&sc.merge)[p];
            !removed.contains(producer)
        });
        if gated_alive {
            scaffold.insert(sc.merge.clone());
            scaffold.extend(sc.chain.iter().filter(|c| spec.node(c).is_some_and(|n| n.artificial)).cloned());
        }
    }
    scaffold
}

/// Turns thresholded gates into removals. Structure gates below threshold
/// remove their site; filter gates below threshold remove channels. A conv
/// losing every filter becomes a layer removal when it has a shortcut and
/// otherwise keeps its strongest filter, zeroed.
pub fn plan_from_gates(spec: &ModelSpec, gates: &[Gate], thresholds: &Thresholds) -> Result<PruningPlan> {
    let structure = analyze(spec)?;
    let mut plan = PruningPlan { thresholds: thresholds.clone(), ..Default::default() };
    let mut filter_cut: Vec<(&Gate, Vec<usize>)> = Vec::new();
    for gate in gates {
        let Some(&t) = thresholds.get(&gate.granularity) else { continue };
        if gate.granularity == Granularity::Filter {
            let cut: Vec<usize> = (0..gate.phi.len()).filter(|&i| gate.phi[i] < t).collect();
            if !cut.is_empty() {
                filter_cut.push((gate, cut));
            }
        } else if gate.phi[0] < t {
            let site = structure
                .site(gate.granularity, &gate.attachment)
                .ok_or_else(|| Error::Surgery(format!("gate '{}' does not match any {}", gate.id, gate.granularity)))?;
            if site.shortcut.is_none() {
                return Err(Error::Surgery(format!("{} '{}' is unprunable without shortcut", gate.granularity, site.id)));
            }
            plan.structures_mut(gate.granularity).insert(site.id.clone());
        }
    }
    for (gate, cut) in filter_cut {
        let stack = structure
            .stack(&gate.attachment)
            .ok_or_else(|| Error::Surgery(format!("filter gate '{}' has no prunable conv", gate.id)))?;
        if cut.len() < stack.filters {
            plan.filters.insert(stack.conv.clone(), cut);
            continue;
        }
        let layer_site = structure.site(Granularity::Layer, &stack.conv).filter(|s| s.shortcut.is_some());
        if layer_site.is_some() {
            plan.layers.insert(stack.conv.clone());
            continue;
        }
        let audit = gate.audit.as_ref().unwrap_or(&gate.phi);
        let keep = (0..audit.len()).fold(0, |best, i| if audit[i] > audit[best] { i } else { best });
        plan.filters.insert(stack.conv.clone(), cut.into_iter().filter(|&c| c != keep).collect());
        plan.zeroed.insert(stack.conv.clone(), vec![keep]);
    }

    // drop work that an enclosing removal already covers
    let sites = removed_sites(&structure, &plan)?;
    let bodies: Vec<BTreeSet<&str>> = sites.iter().map(|s| s.body.iter().map(String::as_str).collect()).collect();
    for (i, site) in sites.iter().enumerate() {
        let nested = bodies.iter().enumerate().any(|(j, b)| j != i && bodies[i].is_subset(b) && bodies[i].len() < b.len());
        if nested {
            plan.structures_mut(site.granularity).remove(&site.id);
        }
    }
    let removed: BTreeSet<String> = bodies.iter().flatten().map(|s| s.to_string()).collect();
    plan.filters.retain(|conv, cut| !removed.contains(conv) && !cut.is_empty());
    plan.zeroed.retain(|conv, _| !removed.contains(conv));
    plan.scaffold = scaffold_of(spec, &structure, &removed);
    Ok(plan)
}

fn remove_node(spec: &mut ModelSpec, weights: &mut Weights, id: &str) {
    spec.nodes.retain(|n| n.id != id);
    spec.edges.retain(|e| e.0 != id && e.1 != id);
    let prefix = format!("{id}.");
    weights.params.retain(|k, _| !k.starts_with(&prefix));
    weights.buffers.retain(|k, _| !k.starts_with(&prefix));
}

fn zero_channels(spec: &ModelSpec, structure: &Structure, weights: &mut Weights, conv: &str, channels: &[usize]) -> Result<()> {
    let stack = structure.stack(conv).ok_or_else(|| Error::Surgery(format!("plan zeroes unknown conv '{conv}'")))?;
    for n in &stack.nodes {
        let keys: &[&str] = match spec.node(n).map(|n| &n.kind) {
            Some(NodeKind::Conv { .. }) => &["weight", "bias"],
            Some(NodeKind::Batchnorm) => &["gamma", "beta"],
            _ => &[],
        };
        for k in keys {
            let Some(t) = weights.params.get_mut(&format!("{n}.{k}")) else { continue };
            let per = t.numel() / t.shape()[0];
            for &c in channels {
                if c >= t.shape()[0] {
                    return Err(Error::Surgery(format!("channel {c} out of range for '{conv}'")));
                }
                t.data_mut()[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(())
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Propagates channel liveness in topological order, slicing weights and
/// rewriting add channel maps as it goes.
fn slice_dead_channels(
    spec: &mut ModelSpec,
    structure: &Structure,
    weights: &mut Weights,
    filters: &BTreeMap<String, Vec<usize>>,
) -> Result<()> {
    let table = validate_lenient(spec)?;
    let mut live: HashMap<String, Vec<usize>> = HashMap::new();
    let in_stack: BTreeSet<&str> = structure.stacks.iter().flat_map(|s| s.nodes[1..].iter().map(String::as_str)).collect();
    for id in &table.order {
        let inputs: Vec<String> = spec.inputs_of(id).into_iter().map(String::from).collect();
        let in_shape = inputs.first().and_then(|p| table.shape(p)).map(<[usize]>::to_vec);
        let in_live = inputs.first().map(|p| live[p].clone());
        let width = table.shape(id).unwrap()[0];
        let node = spec.node_mut(id).unwrap();
        let slice_input = |weights: &mut Weights, key: String, axis: usize, keep: &[usize], full: usize| -> Result<()> {
            if keep.is_empty() {
                return Err(Error::Surgery(format!("every input channel of '{id}' would be removed")));
            }
            if keep.len() < full {
                let t = weights.params.get_mut(&key).expect("weights checked");
                *t = t.select(axis, keep)?;
            }
            Ok(())
        };
        let out_live = match &mut node.kind {
            NodeKind::Input => all(width),
            NodeKind::Conv { filters: count, bias, .. } => {
                let il = in_live.unwrap();
                slice_input(weights, format!("{id}.weight"), 1, &il, in_shape.unwrap()[0])?;
                let cut = filters.get(id).map(Vec::as_slice).unwrap_or(&[]);
                let keep: Vec<usize> = (0..*count).filter(|c| !cut.contains(c)).collect();
                if keep.is_empty() {
                    return Err(Error::Surgery(format!("conv '{id}' would lose every filter")));
                }
                if keep.len() < *count {
                    let w = weights.params.get_mut(&format!("{id}.weight")).unwrap();
                    *w = w.select(0, &keep)?;
                    if *bias {
                        let b = weights.params.get_mut(&format!("{id}.bias")).unwrap();
                        *b = b.select(0, &keep)?;
                    }
                    *count = keep.len();
                }
                keep
            }
            NodeKind::Dense { .. } => {
                slice_input(weights, format!("{id}.weight"), 0, &in_live.unwrap(), in_shape.unwrap()[0])?;
                all(width)
            }
            NodeKind::Adapter { op: crate::spec::AdapterOp::Project(_) } => {
                slice_input(weights, format!("{id}.weight"), 1, &in_live.unwrap(), in_shape.unwrap()[0])?;
                all(width)
            }
            NodeKind::Batchnorm => {
                let il = in_live.unwrap();
                if il.len() < width {
                    if !in_stack.contains(id.as_str()) {
                        return Err(Error::Surgery(format!("batchnorm '{id}' would turn removed channels nonzero")));
                    }
                    for k in ["gamma", "beta"] {
                        let t = weights.params.get_mut(&format!("{id}.{k}")).unwrap();
                        *t = t.select(0, &il)?;
                    }
                    for k in ["running_mean", "running_var"] {
                        let t = weights.buffers.get_mut(&format!("{id}.{k}")).unwrap();
                        *t = t.select(0, &il)?;
                    }
                }
                il
            }
            NodeKind::Relu | NodeKind::Pool { .. } | NodeKind::Dropout { .. } | NodeKind::Adapter { .. } => in_live.unwrap(),
            NodeKind::Flatten => {
                let shape = in_shape.unwrap();
                let s: usize = shape[1..].iter().product();
                in_live.unwrap().iter().flat_map(|&c| c * s..(c + 1) * s).collect()
            }
            NodeKind::Add { channels, channel_maps } => {
                let mapped: Vec<Vec<usize>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(pos, p)| {
                        let map = channel_maps.get(pos).cloned().flatten();
                        live[p].iter().map(|&c| map.as_ref().map_or(c, |m| m[c])).collect()
                    })
                    .collect();
                let union: Vec<usize> = mapped.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
                if union.is_empty() {
                    return Err(Error::Surgery(format!("add '{id}' would lose every channel")));
                }
                let new_maps: Vec<Option<Vec<usize>>> = mapped
                    .iter()
                    .map(|m| {
                        let positions: Vec<usize> = m.iter().map(|c| union.binary_search(c).unwrap()).collect();
                        (positions.len() != union.len()).then_some(positions)
                    })
                    .collect();
                if new_maps.iter().all(Option::is_none) {
                    *channels = None;
                    channel_maps.clear();
                } else {
                    *channels = Some(union.len());
                    *channel_maps = new_maps;
                }
                union
            }
        };
        live.insert(id.clone(), out_live);
    }
    Ok(())
}

/// Replaces adds left with a single input by a plain wire.
fn collapse_wires(spec: &mut ModelSpec, weights: &mut Weights) {
    loop {
        let single = spec
            .nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Add { .. }) && spec.inputs_of(&n.id).len() == 1)
            .map(|n| n.id.clone());
        let Some(add) = single else { break };
        let src = spec.inputs_of(&add)[0].to_string();
        for e in spec.edges.iter_mut().filter(|e| e.0 == add) {
            e.0 = src.clone();
        }
        remove_node(spec, weights, &add);
        for br in &mut spec.branches {
            br.nodes.retain(|n| *n != add);
        }
    }
}

fn prune_groups(spec: &mut ModelSpec) {
    let ids: BTreeSet<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
    for br in &mut spec.branches {
        br.nodes.retain(|n| ids.contains(n));
    }
    spec.branches.retain(|b| !b.nodes.is_empty());
    let branches: BTreeSet<String> = spec.branches.iter().map(|b| b.id.clone()).collect();
    for bl in &mut spec.blocks {
        bl.branches.retain(|b| branches.contains(b));
    }
    spec.blocks.retain(|b| !b.branches.is_empty());
}

/// Applies `plan`, returning the pruned spec and weights. With
/// `keep_scaffold` the pruned network computes exactly what the gated
/// network computed with the plan's gates binarized; without it, surviving
/// artificial shortcuts are deleted as well, which changes the function.
pub fn apply_plan(spec: &ModelSpec, weights: &Weights, plan: &PruningPlan, keep_scaffold: bool) -> Result<(ModelSpec, Weights)> {
    let structure = analyze(spec)?;
    let (pshapes, _) = weight_shapes(spec, &validate(spec)?);
    if let Some(missing) = pshapes.keys().find(|k| !weights.params.contains_key(*k)) {
        return Err(Error::Surgery(format!("weights do not match spec: missing '{missing}'")));
    }
    for (conv, cut) in plan.filters.iter().chain(&plan.zeroed) {
        let stack = structure.stack(conv).ok_or_else(|| Error::Surgery(format!("plan prunes unknown conv '{conv}'")))?;
        if let Some(bad) = cut.iter().find(|&&c| c >= stack.filters) {
            return Err(Error::Surgery(format!("channel {bad} out of range for '{conv}' with {} filters", stack.filters)));
        }
    }
    let sites = removed_sites(&structure, plan)?;
    let mut spec = spec.clone();
    let mut weights = weights.clone();

    for (conv, channels) in &plan.zeroed {
        zero_channels(&spec, &structure, &mut weights, conv, channels)?;
    }

    let removed: BTreeSet<String> = sites.iter().flat_map(|s| s.body.iter().cloned()).collect();
    for id in &removed {
        remove_node(&mut spec, &mut weights, id);
    }
    prune_groups(&mut spec);

    if !keep_scaffold {
        for site in &structure.sites {
            let Some(sc) = &site.shortcut else { continue };
            if !plan.scaffold.contains(&sc.merge) || spec.node(&sc.merge).is_none() {
                continue;
            }
            if spec.inputs_of(&sc.merge).len() < 2 {
                continue;
            }
            // drop the shortcut edge, then any scaffold chain left dangling
            let producer = sc.chain.last().unwrap_or(&site.entry).clone();
            if let Some(at) = spec.edges.iter().position(|e| e.0 == producer && e.1 == sc.merge) {
                spec.edges.remove(at);
            }
            for node in sc.chain.iter().rev() {
                if plan.scaffold.contains(node) && spec.consumers_of(node).is_empty() {
                    remove_node(&mut spec, &mut weights, node);
                }
            }
        }
    }

    let filters: BTreeMap<String, Vec<usize>> = plan.filters.iter().filter(|(c, _)| !removed.contains(*c)).map(|(c, v)| (c.clone(), v.clone())).collect();
    slice_dead_channels(&mut spec, &structure, &mut weights, &filters)?;
    collapse_wires(&mut spec, &mut weights);
    prune_groups(&mut spec);
    validate(&spec).map_err(|e| Error::Surgery(format!("pruned spec is invalid: {e}")))?;
    Ok((spec, weights))
}

/// Max absolute logit difference between two networks in eval mode on
/// `n_samples` inputs drawn from U(-2, 2).
pub fn verify_equivalence(gated: &mut Network, pruned: &mut Network, n_samples: usize, seed: u64) -> Result<f64> {
    if gated.spec.input_shape != pruned.spec.input_shape {
        return Err(Error::shape("verify_equivalence", &gated.spec.input_shape, &pruned.spec.input_shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n_samples.max(1)];
    shape.extend_from_slice(&gated.spec.input_shape);
    let x = Tensor::from_fn(&shape, |_| rng.gen_range(-2.0..2.0));
    let a = gated.predict_batched(&x, 64)?;
    let b = pruned.predict_batched(&x, 64)?;
    a.max_abs_diff(&b)
}
