//! Locating prunable structures in a spec.
//!
//! A *stack* is a prunable conv followed by an optional batchnorm and an
//! optional relu, each the sole consumer of the previous node; filter gates
//! scale the stack's last node. A *site* is a layer (one stack), a branch
//! (an annotated path) or a block (a set of branches sharing an entry). A site
//! can be skipped when its outputs flow only into an add that also receives
//! the site's entry, directly or through a chain of shape adapters.

use std::collections::BTreeSet;

use serde::Serialize;

use super::{ModelSpec, NodeKind, SpecGraph};
use crate::error::{Diagnostic, Error, Result};
use crate::gates::Granularity;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stack {
    pub conv: String,
    /// The conv and its trailing batchnorm/relu, in order.
    pub nodes: Vec<String>,
    pub exit: String,
    pub filters: usize,
}

/// The residual add that lets a site be skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shortcut {
    pub merge: String,
    /// Positions of the site's outputs among the merge's inputs.
    pub gated_inputs: Vec<usize>,
    /// Position of the shortcut among the merge's inputs.
    pub input: usize,
    /// Nodes between the entry and the merge on the shortcut path, entry side first.
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Site {
    pub id: String,
    pub granularity: Granularity,
    pub entry: String,
    pub exits: Vec<String>,
    /// Nodes deleted when the site is removed, in spec order.
    pub body: Vec<String>,
    pub shortcut: Option<Shortcut>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Structure {
    pub stacks: Vec<Stack>,
    pub sites: Vec<Site>,
}

impl Structure {
    pub fn stack(&self, conv: &str) -> Option<&Stack> {
        self.stacks.iter().find(|s| s.conv == conv)
    }

    pub fn stack_with_exit(&self, node: &str) -> Option<&Stack> {
        self.stacks.iter().find(|s| s.exit == node)
    }

    pub fn stack_containing(&self, node: &str) -> Option<&Stack> {
        self.stacks.iter().find(|s| s.nodes.iter().any(|n| n == node))
    }

    pub fn site(&self, granularity: Granularity, id: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.granularity == granularity && s.id == id)
    }

    pub fn sites(&self, granularity: Granularity) -> impl Iterator<Item = &Site> {
        self.sites.iter().filter(move |s| s.granularity == granularity)
    }

    /// Gate attachment points and gate lengths for one granularity. Structure
    /// sites qualify only when they have a shortcut.
    pub fn attachments(&self, _spec: &ModelSpec, granularity: Granularity) -> Vec<(String, usize)> {
        match granularity {
            Granularity::Filter => self.stacks.iter().map(|s| (s.conv.clone(), s.filters)).collect(),
            g => self.sites(g).filter(|s| s.shortcut.is_some()).map(|s| (s.id.clone(), 1)).collect(),
        }
    }
}

fn stack_of(spec: &ModelSpec, graph: &SpecGraph, conv: usize) -> Stack {
    let mut nodes = vec![conv];
    let mut cur = conv;
    for want in ["batchnorm", "relu"] {
        match graph.consumers[cur].as_slice() {
            [next] if spec.nodes[*next].kind.name() == want && graph.inputs[*next].len() == 1 => {
                nodes.push(*next);
                cur = *next;
            }
            _ => {}
        }
    }
    let filters = match spec.nodes[conv].kind {
        NodeKind::Conv { filters, .. } => filters,
        _ => unreachable!("stacks start at conv nodes"),
    };
    Stack {
        conv: spec.nodes[conv].id.clone(),
        nodes: nodes.iter().map(|&i| spec.nodes[i].id.clone()).collect(),
        exit: spec.nodes[cur].id.clone(),
        filters,
    }
}

/// Walks back from `from` through single-input, single-consumer shape
/// adapters until reaching `entry`.
fn shortcut_chain(spec: &ModelSpec, graph: &SpecGraph, from: usize, entry: usize) -> Option<Vec<usize>> {
    let mut chain = Vec::new();
    let mut cur = from;
    while cur != entry {
        let passable = match &spec.nodes[cur].kind {
            NodeKind::Adapter { .. } | NodeKind::Pool { .. } | NodeKind::Batchnorm => true,
            NodeKind::Conv { .. } => !spec.nodes[cur].prunable,
            _ => false,
        };
        if !passable || graph.inputs[cur].len() != 1 || graph.consumers[cur].len() != 1 {
            return None;
        }
        chain.push(cur);
        cur = graph.inputs[cur][0];
    }
    chain.reverse();
    Some(chain)
}

fn find_shortcut(spec: &ModelSpec, graph: &SpecGraph, entry: usize, exits: &[usize]) -> Option<Shortcut> {
    let merge = match graph.consumers[exits[0]].as_slice() {
        [m] => *m,
        _ => return None,
    };
    if !matches!(spec.nodes[merge].kind, NodeKind::Add { .. }) || exits.iter().any(|&e| graph.consumers[e] != [merge]) {
        return None;
    }
    let inputs = &graph.inputs[merge];
    let gated: Vec<usize> = (0..inputs.len()).filter(|&p| exits.contains(&inputs[p])).collect();
    let (input, chain) = (0..inputs.len())
        .filter(|p| !gated.contains(p))
        .find_map(|p| shortcut_chain(spec, graph, inputs[p], entry).map(|c| (p, c)))?;
    Some(Shortcut {
        merge: spec.nodes[merge].id.clone(),
        gated_inputs: gated,
        input,
        chain: chain.iter().map(|&i| spec.nodes[i].id.clone()).collect(),
    })
}

fn body_of(graph: &SpecGraph, entry: usize, exits: &[usize]) -> BTreeSet<usize> {
    let down = graph.descendants(entry);
    let mut body: BTreeSet<usize> = exits.iter().copied().collect();
    for &e in exits {
        body.extend(graph.ancestors(e).intersection(&down));
    }
    body.remove(&entry);
    body
}

/// The node a block's branches join at, when they join before any shortcut:
/// a single consumer add whose inputs are exactly the branch exits.
fn joining_add(spec: &ModelSpec, graph: &SpecGraph, exits: &[usize]) -> Option<usize> {
    let join = match graph.consumers[exits[0]].as_slice() {
        [j] => *j,
        _ => return None,
    };
    let is_add = matches!(spec.nodes[join].kind, NodeKind::Add { .. });
    let mut ins = graph.inputs[join].clone();
    ins.sort_unstable();
    let mut ex = exits.to_vec();
    ex.sort_unstable();
    (is_add && exits.len() > 1 && ins == ex && exits.iter().all(|&e| graph.consumers[e] == [join])).then_some(join)
}

fn make_site(
    spec: &ModelSpec,
    graph: &SpecGraph,
    id: &str,
    granularity: Granularity,
    entry: usize,
    exits: Vec<usize>,
) -> Result<Site, Diagnostic> {
    let shortcut = find_shortcut(spec, graph, entry, &exits);
    let body = body_of(graph, entry, &exits);
    let merge = shortcut.as_ref().and_then(|s| graph.idx(&s.merge));
    for &b in &body {
        let outside_consumer = graph.consumers[b].iter().find(|c| !body.contains(c) && Some(**c) != merge);
        let outside_producer = graph.inputs[b].iter().find(|p| !body.contains(p) && **p != entry);
        let culprit = match (outside_consumer, outside_producer) {
            (Some(c), _) => Some(format!("consumed by '{}' outside the {granularity}", graph.ids[*c])),
            (_, Some(p)) => Some(format!("fed by '{}' from outside the {granularity}", graph.ids[*p])),
            _ => None,
        };
        // a site without a shortcut yet may still feed its eventual merge point
        if let Some(msg) = culprit {
            if shortcut.is_some() || !exits.contains(&b) {
                return Err(Diagnostic::at(&graph.ids[b], format!("{granularity} '{id}' is not self-contained: {msg}")));
            }
        }
    }
    let mut body: Vec<usize> = body.into_iter().collect();
    body.sort_unstable();
    Ok(Site {
        id: id.to_string(),
        granularity,
        entry: graph.ids[entry].clone(),
        exits: exits.iter().map(|&e| graph.ids[e].clone()).collect(),
        body: body.iter().map(|&b| graph.ids[b].clone()).collect(),
        shortcut,
    })
}

fn branch_entry(graph: &SpecGraph, first: usize) -> Option<usize> {
    match graph.inputs[first].as_slice() {
        [e] => Some(*e),
        _ => None,
    }
}

/// Annotation checks run as part of validation.
pub(crate) fn check_groups(spec: &ModelSpec, graph: &SpecGraph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen_nodes: BTreeSet<&str> = BTreeSet::new();
    let mut branch_ids = BTreeSet::new();
    for br in &spec.branches {
        if !branch_ids.insert(br.id.as_str()) {
            diags.push(Diagnostic::global(format!("duplicate branch id '{}'", br.id)));
        }
        if br.nodes.is_empty() {
            diags.push(Diagnostic::global(format!("branch '{}' has no nodes", br.id)));
            continue;
        }
        let idx: Vec<Option<usize>> = br.nodes.iter().map(|n| graph.idx(n)).collect();
        for (n, i) in br.nodes.iter().zip(&idx) {
            if i.is_none() {
                diags.push(Diagnostic::at(n, format!("branch '{}' references unknown node '{n}'", br.id)));
            }
            if !seen_nodes.insert(n) {
                diags.push(Diagnostic::at(n, format!("node '{n}' belongs to more than one branch")));
            }
        }
        let Some(idx) = idx.into_iter().collect::<Option<Vec<_>>>() else { continue };
        for w in idx.windows(2) {
            if !graph.inputs[w[1]].contains(&w[0]) {
                diags.push(Diagnostic::at(
                    &graph.ids[w[1]],
                    format!("branch '{}' is not a path: '{}' does not feed '{}'", br.id, graph.ids[w[0]], graph.ids[w[1]]),
                ));
            }
        }
        if branch_entry(graph, idx[0]).is_none() {
            diags.push(Diagnostic::at(&br.nodes[0], format!("branch '{}' must start at a node with one producer", br.id)));
        }
    }
    let mut block_ids = BTreeSet::new();
    let mut used = BTreeSet::new();
    for bl in &spec.blocks {
        if !block_ids.insert(bl.id.as_str()) {
            diags.push(Diagnostic::global(format!("duplicate block id '{}'", bl.id)));
        }
        if bl.branches.is_empty() {
            diags.push(Diagnostic::global(format!("block '{}' has no branches", bl.id)));
        }
        let mut entries = BTreeSet::new();
        for b in &bl.branches {
            if !used.insert(b.as_str()) {
                diags.push(Diagnostic::global(format!("branch '{b}' belongs to more than one block")));
            }
            match spec.branches.iter().find(|x| &x.id == b) {
                None => diags.push(Diagnostic::global(format!("block '{}' references unknown branch '{b}'", bl.id))),
                Some(br) => {
                    if let Some(e) = br.nodes.first().and_then(|n| graph.idx(n)).and_then(|f| branch_entry(graph, f)) {
                        entries.insert(e);
                    }
                }
            }
        }
        if entries.len() > 1 {
            diags.push(Diagnostic::global(format!("branches of block '{}' do not share an entry node", bl.id)));
        }
    }
    diags
}

/// Finds every stack and site. `spec` must already validate.
pub fn analyze(spec: &ModelSpec) -> Result<Structure> {
    super::validate(spec)?;
    let graph = SpecGraph::build(spec).map_err(Error::InvalidSpec)?;
    let mut structure = Structure::default();
    let mut diags = Vec::new();

    for (i, node) in spec.nodes.iter().enumerate() {
        if node.prunable && matches!(node.kind, NodeKind::Conv { .. }) {
            structure.stacks.push(stack_of(spec, &graph, i));
        }
    }
    let stack_sites: Vec<_> = structure
        .stacks
        .iter()
        .map(|s| (s.conv.clone(), graph.idx(&s.conv).unwrap(), graph.idx(&s.exit).unwrap()))
        .collect();
    for (conv, ci, exit) in stack_sites {
        let entry = graph.inputs[ci][0];
        match make_site(spec, &graph, &conv, Granularity::Layer, entry, vec![exit]) {
            Ok(site) => structure.sites.push(site),
            Err(d) => diags.push(d),
        }
    }
    let branch_exit = |b: &str| -> Option<(usize, usize)> {
        let br = spec.branches.iter().find(|x| x.id == b)?;
        let first = graph.idx(br.nodes.first()?)?;
        Some((branch_entry(&graph, first)?, graph.idx(br.nodes.last()?)?))
    };
    for br in &spec.branches {
        let (entry, exit) = branch_exit(&br.id).expect("validated");
        match make_site(spec, &graph, &br.id, Granularity::Branch, entry, vec![exit]) {
            Ok(site) => structure.sites.push(site),
            Err(d) => diags.push(d),
        }
    }
    for bl in &spec.blocks {
        let parts: Vec<(usize, usize)> = bl.branches.iter().map(|b| branch_exit(b).expect("validated")).collect();
        let entry = parts[0].0;
        let mut exits: Vec<usize> = parts.iter().map(|p| p.1).collect();
        if find_shortcut(spec, &graph, entry, &exits).is_none() {
            if let Some(join) = joining_add(spec, &graph, &exits) {
                exits = vec![join];
            }
        }
        match make_site(spec, &graph, &bl.id, Granularity::Block, entry, exits) {
            Ok(site) => structure.sites.push(site),
            Err(d) => diags.push(d),
        }
    }
    if diags.is_empty() {
        Ok(structure)
    } else {
        Err(Error::InvalidSpec(diags))
    }
}
