//! Declarative network descriptions.
//!
//! A [`ModelSpec`] is a DAG of typed nodes plus optional branch and block
//! groupings. It serializes to JSON:
//!
//! ```json
//! {
//!   "name": "tiny",
//!   "input_shape": [1, 8, 8],
//!   "classes": 2,
//!   "nodes": [
//!     {"id": "input", "kind": "input"},
//!     {"id": "c1", "kind": "conv", "filters": 4, "kernel": 3, "stride": 1, "padding": 1, "bias": true, "prunable": true},
//!     {"id": "r1", "kind": "relu"},
//!     {"id": "gap", "kind": "pool", "mode": "avg", "window": 8, "stride": 8},
//!     {"id": "flat", "kind": "flatten"},
//!     {"id": "fc", "kind": "dense", "units": 2, "bias": true}
//!   ],
//!   "edges": [["input", "c1"], ["c1", "r1"], ["r1", "gap"], ["gap", "flat"], ["flat", "fc"]],
//!   "branches": [{"id": "b0", "nodes": ["c1", "r1"]}],
//!   "blocks": [{"id": "k0", "branches": ["b0"]}]
//! }
//! ```
//!
//! Activation shapes exclude the batch axis: `[C, H, W]` for feature maps,
//! `[D]` for flat features. The input order of a multi-input node is the order
//! of its incoming edges in `edges`.

pub mod catalog;
pub mod shortcuts;
pub mod structure;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};
use crate::tensor::kernels::{window_extent, PoolMode};

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Operation performed by one adapter node on a shortcut path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterOp {
    /// Average pooling with window and stride equal to the given factor.
    Pool(usize),
    /// Bias-free 1x1 convolution to the given channel count.
    Project(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Dense {
        units: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Pool {
        mode: PoolMode,
        window: usize,
        stride: usize,
    },
    Batchnorm,
    Relu,
    /// Elementwise sum. When `channel_maps` is non-empty it holds, per input
    /// (in edge order), either `null` or the output channel each input channel
    /// lands on, and `channels` fixes the output channel count.
    Add {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<usize>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        channel_maps: Vec<Option<Vec<usize>>>,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
    Adapter {
        op: AdapterOp,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::Dense { .. } => "dense",
            NodeKind::Pool { .. } => "pool",
            NodeKind::Batchnorm => "batchnorm",
            NodeKind::Relu => "relu",
            NodeKind::Add { .. } => "add",
            NodeKind::Flatten => "flatten",
            NodeKind::Dropout { .. } => "dropout",
            NodeKind::Adapter { .. } => "adapter",
        }
    }

    pub fn plain_add() -> Self {
        NodeKind::Add { channels: None, channel_maps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub prunable: bool,
    /// Set on nodes introduced by shortcut insertion.
    #[serde(default, skip_serializing_if = "is_false")]
    pub artificial: bool,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        Self { id: id.into(), kind, prunable: false, artificial: false }
    }

    pub fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }

    pub fn artificial(mut self) -> Self {
        self.artificial = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge(pub String, pub String);

impl Edge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Edge(from.into(), to.into())
    }
}

/// A sequential path of nodes that can be skipped as a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchGroup {
    pub id: String,
    pub nodes: Vec<String>,
}

/// A union of branches sharing their entry and merge point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub id: String,
    pub branches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<BranchGroup>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockGroup>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeSpec> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Producers of `id`, in input order.
    pub fn inputs_of(&self, id: &str) -> Vec<&str> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0.as_str()).collect()
    }

    pub fn consumers_of(&self, id: &str) -> Vec<&str> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1.as_str()).collect()
    }

    /// An id not yet used by any node, derived from `base`.
    pub fn fresh_id(&self, base: &str) -> String {
        if self.node(base).is_none() {
            return base.to_string();
        }
        (2..).map(|i| format!("{base}_{i}")).find(|c| self.node(c).is_none()).expect("unbounded")
    }
}

/// Index-based view of a spec's topology.
#[derive(Debug, Clone)]
pub struct SpecGraph {
    pub ids: Vec<String>,
    pub index: HashMap<String, usize>,
    /// Producers per node, in input order.
    pub inputs: Vec<Vec<usize>>,
    pub consumers: Vec<Vec<usize>>,
    /// Topological order; ties broken by position in `nodes`.
    pub topo: Vec<usize>,
}

impl SpecGraph {
    pub fn build(spec: &ModelSpec) -> Result<Self, Vec<Diagnostic>> {
        let mut diags = Vec::new();
        let mut index = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                diags.push(Diagnostic::at(&n.id, "duplicate node id"));
            }
        }
        let count = spec.nodes.len();
        let mut inputs = vec![Vec::new(); count];
        let mut consumers = vec![Vec::new(); count];
        for Edge(from, to) in &spec.edges {
            match (index.get(from), index.get(to)) {
                (Some(&f), Some(&t)) => {
                    inputs[t].push(f);
                    consumers[f].push(t);
                }
                (f, t) => {
                    if f.is_none() {
                        diags.push(Diagnostic::at(from, format!("edge {from} -> {to} references unknown node '{from}'")));
                    }
                    if t.is_none() {
                        diags.push(Diagnostic::at(to, format!("edge {from} -> {to} references unknown node '{to}'")));
                    }
                }
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }
        let mut indegree: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (0..count).filter(|&i| indegree[i] == 0).collect();
        let mut topo = Vec::with_capacity(count);
        while let Some(i) = ready.pop_first() {
            topo.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if topo.len() != count {
            let cyclic: Vec<_> = (0..count).filter(|&i| indegree[i] > 0).map(|i| spec.nodes[i].id.clone()).collect();
            return Err(vec![Diagnostic::global(format!("cycle through nodes {cyclic:?}"))]);
        }
        let ids = spec.nodes.iter().map(|n| n.id.clone()).collect();
        Ok(Self { ids, index, inputs, consumers, topo })
    }

    pub fn idx(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// All nodes reachable from `start` (exclusive) following edges forward.
    pub fn descendants(&self, start: usize) -> BTreeSet<usize> {
        self.walk(start, &self.consumers)
    }

    /// All nodes from which `start` is reachable (exclusive).
    pub fn ancestors(&self, start: usize) -> BTreeSet<usize> {
        self.walk(start, &self.inputs)
    }

    fn walk(&self, start: usize, next: &[Vec<usize>]) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &m in &next[n] {
                if seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        seen
    }

    pub fn sinks(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.consumers[i].is_empty()).collect()
    }
}

/// Per-node output shapes (batch axis excluded), in topological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeTable {
    pub order: Vec<String>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub output: String,
}

impl ShapeTable {
    pub fn shape(&self, id: &str) -> Option<&[usize]> {
        self.shapes.get(id).map(Vec::as_slice)
    }

    /// Aligned text rendering, one node per line.
    pub fn render(&self, spec: &ModelSpec) -> String {
        let width = self.order.iter().map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        for id in &self.order {
            let kind = spec.node(id).map_or("?", |n| n.kind.name());
            let shape = &self.shapes[id];
            out.push_str(&format!("{id:<width$}  {kind:<9}  {shape:?}\n"));
        }
        out
    }
}

fn infer_shape(node: &NodeSpec, ins: &[&[usize]], min_add_inputs: usize) -> Result<Vec<usize>, String> {
    let single = || -> Result<&[usize], String> {
        match ins {
            [one] => Ok(*one),
            _ => Err(format!("{} takes exactly one input, got {}", node.kind.name(), ins.len())),
        }
    };
    let spatial = |op: &'static str| -> Result<(usize, usize, usize), String> {
        match single()? {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(format!("{op} expects a [C, H, W] input, got {other:?}")),
        }
    };
    match &node.kind {
        NodeKind::Input => Err("input node cannot have producers".into()),
        NodeKind::Conv { filters, kernel, stride, padding, .. } => {
            let (_, h, w) = spatial("conv")?;
            if *filters == 0 {
                return Err("conv with zero filters".into());
            }
            let oh = window_extent("conv", h, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
            let ow = window_extent("conv", w, *kernel, *stride, *padding).map_err(|e| e.to_string())?;
            Ok(vec![*filters, oh, ow])
        }
        NodeKind::Dense { units, .. } => match single()? {
            [_] if *units > 0 => Ok(vec![*units]),
            [_] => Err("dense with zero units".into()),
            other => Err(format!("dense expects a flat [D] input, got {other:?}")),
        },
        NodeKind::Pool { window, stride, .. } => {
            let (c, h, w) = spatial("pool")?;
            if *window > h || *window > w {
                return Err(format!("pool window {window} larger than input {h}x{w}"));
            }
            let oh = window_extent("pool", h, *window, *stride, 0).map_err(|e| e.to_string())?;
            let ow = window_extent("pool", w, *window, *stride, 0).map_err(|e| e.to_string())?;
            Ok(vec![c, oh, ow])
        }
        NodeKind::Batchnorm | NodeKind::Relu => Ok(single()?.to_vec()),
        NodeKind::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(format!("dropout rate {rate} outside [0, 1)"));
            }
            Ok(single()?.to_vec())
        }
        NodeKind::Flatten => Ok(vec![single()?.iter().product()]),
        NodeKind::Adapter { op } => {
            let (c, h, w) = spatial("adapter")?;
            match op {
                AdapterOp::Pool(f) => {
                    let oh = window_extent("adapter pool", h, *f, *f, 0).map_err(|e| e.to_string())?;
                    let ow = window_extent("adapter pool", w, *f, *f, 0).map_err(|e| e.to_string())?;
                    Ok(vec![c, oh, ow])
                }
                AdapterOp::Project(d) if *d > 0 => Ok(vec![*d, h, w]),
                AdapterOp::Project(_) => Err("adapter projection to zero channels".into()),
            }
        }
        NodeKind::Add { channels, channel_maps } => {
            if ins.len() < min_add_inputs {
                return Err(format!("add needs at least two inputs, got {}", ins.len()));
            }
            if channel_maps.is_empty() {
                let first = ins[0];
                if let Some(bad) = ins.iter().find(|s| **s != first) {
                    return Err(format!("add input shapes differ: {first:?} vs {bad:?}"));
                }
                return Ok(first.to_vec());
            }
            if channel_maps.len() != ins.len() {
                return Err(format!("{} channel maps for {} inputs", channel_maps.len(), ins.len()));
            }
            let out_c = channels.ok_or("add with channel maps needs an explicit channel count")?;
            let tail = &ins[0][1..];
            for (shape, map) in ins.iter().zip(channel_maps) {
                if shape.is_empty() || &shape[1..] != tail {
                    return Err(format!("add input shapes differ beyond the channel axis: {shape:?}"));
                }
                match map {
                    None if shape[0] != out_c => {
                        return Err(format!("unmapped add input has {} channels, expected {out_c}", shape[0]))
                    }
                    Some(m) if m.len() != shape[0] => {
                        return Err(format!("channel map of length {} for {} channels", m.len(), shape[0]))
                    }
                    Some(m) if m.windows(2).any(|w| w[0] >= w[1]) || m.iter().any(|&c| c >= out_c) => {
                        return Err(format!("channel map {m:?} must be increasing and below {out_c}"))
                    }
                    _ => {}
                }
            }
            let mut out = vec![out_c];
            out.extend_from_slice(tail);
            Ok(out)
        }
    }
}

/// Full shape inference and structural checks.
pub fn validate(spec: &ModelSpec) -> Result<ShapeTable> {
    validate_with(spec, 2)
}

/// Validation that tolerates single-input adds, for graphs mid-surgery.
pub(crate) fn validate_lenient(spec: &ModelSpec) -> Result<ShapeTable> {
    validate_with(spec, 1)
}

fn validate_with(spec: &ModelSpec, min_add_inputs: usize) -> Result<ShapeTable> {
    if spec.nodes.is_empty() {
        return Err(Error::InvalidSpec(vec![Diagnostic::global("no nodes")]));
    }
    let graph = SpecGraph::build(spec).map_err(Error::InvalidSpec)?;
    let mut diags = Vec::new();

    let input_nodes: Vec<_> = spec.nodes.iter().filter(|n| n.kind == NodeKind::Input).collect();
    if input_nodes.len() != 1 {
        diags.push(Diagnostic::global(format!("expected exactly one input node, found {}", input_nodes.len())));
    }
    if spec.input_shape.is_empty() || spec.input_shape.iter().any(|&d| d == 0) {
        diags.push(Diagnostic::global(format!("invalid input shape {:?}", spec.input_shape)));
    }
    for n in &spec.nodes {
        if matches!(n.kind, NodeKind::Adapter { .. }) && (!n.artificial || n.prunable) {
            diags.push(Diagnostic::at(&n.id, "adapter nodes must be artificial and non-prunable"));
        }
        if n.prunable && !matches!(n.kind, NodeKind::Conv { .. }) {
            diags.push(Diagnostic::at(&n.id, "only conv nodes can be prunable"));
        }
    }
    let mut seen_edges = BTreeSet::new();
    for e in &spec.edges {
        if !seen_edges.insert((e.0.as_str(), e.1.as_str())) && !matches!(spec.node(&e.1).map(|n| &n.kind), Some(NodeKind::Add { .. })) {
            diags.push(Diagnostic::at(&e.1, format!("duplicate edge {} -> {}", e.0, e.1)));
        }
    }

    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &graph.topo {
        let node = &spec.nodes[i];
        let result = if node.kind == NodeKind::Input {
            if graph.inputs[i].is_empty() {
                Ok(spec.input_shape.clone())
            } else {
                Err("input node cannot have producers".to_string())
            }
        } else if graph.inputs[i].is_empty() {
            Err(format!("{} node has no producers", node.kind.name()))
        } else {
            let ins: Option<Vec<&[usize]>> =
                graph.inputs[i].iter().map(|&p| shapes.get(&spec.nodes[p].id).map(Vec::as_slice)).collect();
            match ins {
                Some(ins) => infer_shape(node, &ins, min_add_inputs),
                // a producer already failed; its diagnostic suffices
                None => continue,
            }
        };
        match result {
            Ok(shape) => {
                shapes.insert(node.id.clone(), shape);
            }
            Err(msg) => diags.push(Diagnostic::at(&node.id, msg)),
        }
    }

    let sinks = graph.sinks();
    let output = match sinks.as_slice() {
        [one] => spec.nodes[*one].id.clone(),
        _ => {
            let names: Vec<_> = sinks.iter().map(|&s| spec.nodes[s].id.clone()).collect();
            diags.push(Diagnostic::global(format!("expected exactly one output node, found {names:?}")));
            String::new()
        }
    };
    if let Some(out_shape) = shapes.get(&output) {
        if out_shape != &vec![spec.classes] {
            diags.push(Diagnostic::at(&output, format!("output shape {out_shape:?} does not match {} classes", spec.classes)));
        }
    }
    diags.extend(structure::check_groups(spec, &graph));

    if diags.is_empty() {
        let order = graph.topo.iter().map(|&i| spec.nodes[i].id.clone()).collect();
        Ok(ShapeTable { order, shapes, output })
    } else {
        Err(Error::InvalidSpec(diags))
    }
}
