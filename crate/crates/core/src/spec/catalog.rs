//! Built-in model specs.
//!
//! | name           | default input | classes | notes                                   |
//! |----------------|---------------|---------|-----------------------------------------|
//! | `vgg16_custom` | 3x32x32       | 10      | 13 conv stacks, BN everywhere, dropout  |
//! | `resnet56`     | 3x32x32       | 10      | 27 residual blocks in three stages      |
//! | `mini_vgg8`    | 1x28x28       | 10      | 6 conv stacks + 2 dense, same idioms    |
//! | `mini_resnet`  | 1x8x8         | 2       | 3 residual blocks, one downsampling     |
//!
//! Every conv in a stack is prunable; shortcut projections are not. Residual
//! blocks are annotated as one branch and one block each.

use super::{BlockGroup, BranchGroup, Edge, ModelSpec, NodeKind, NodeSpec};
use crate::error::{Error, Result};
use crate::tensor::kernels::PoolMode;

pub const BUILTIN_NAMES: [&str; 4] = ["vgg16_custom", "resnet56", "mini_vgg8", "mini_resnet"];

struct Builder {
    spec: ModelSpec,
    last: String,
    h: usize,
}

impl Builder {
    fn new(name: &str, input_shape: &[usize], classes: usize) -> Self {
        let spec = ModelSpec {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            classes,
            nodes: vec![NodeSpec::new("input", NodeKind::Input)],
            edges: Vec::new(),
            branches: Vec::new(),
            blocks: Vec::new(),
        };
        Self { spec, last: "input".into(), h: input_shape.get(1).copied().unwrap_or(1) }
    }

    fn push_from(&mut self, from: &str, node: NodeSpec) -> String {
        let id = node.id.clone();
        self.spec.edges.push(Edge::new(from, &id));
        self.spec.nodes.push(node);
        self.last = id.clone();
        id
    }

    fn push(&mut self, node: NodeSpec) -> String {
        let from = self.last.clone();
        self.push_from(&from, node)
    }

    fn conv(&mut self, id: &str, filters: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> String {
        self.push(NodeSpec::new(id, NodeKind::Conv { filters, kernel, stride, padding, bias }).prunable())
    }

    /// conv -> batchnorm -> relu with ids `{conv}`, `{bn}`, `{relu}`.
    fn stack(&mut self, ids: [&str; 3], filters: usize, bias: bool) {
        self.conv(ids[0], filters, 3, 1, 1, bias);
        self.push(NodeSpec::new(ids[1], NodeKind::Batchnorm));
        self.push(NodeSpec::new(ids[2], NodeKind::Relu));
    }

    fn pool(&mut self, id: &str, mode: PoolMode, window: usize) {
        self.push(NodeSpec::new(id, NodeKind::Pool { mode, window, stride: window }));
        self.h /= window;
    }

    /// Halves the spatial size when it is even, as VGG stage boundaries do.
    fn stage_pool(&mut self, id: &str) {
        if self.h > 1 && self.h % 2 == 0 {
            self.pool(id, PoolMode::Max, 2);
        }
    }

    fn global_pool(&mut self) {
        if self.h > 1 {
            let h = self.h;
            self.pool("gap", PoolMode::Avg, h);
        }
        self.push(NodeSpec::new("flatten", NodeKind::Flatten));
    }

    fn dense(&mut self, id: &str, units: usize) {
        self.push(NodeSpec::new(id, NodeKind::Dense { units, bias: true }));
    }

    fn residual_block(&mut self, id: &str, filters: usize, downsample: bool) {
        let entry = self.last.clone();
        let (kernel, stride) = if downsample { (4, 2) } else { (3, 1) };
        let path = [format!("{id}_conv1"), format!("{id}_bn1"), format!("{id}_relu1"), format!("{id}_conv2"), format!("{id}_bn2")];
        self.conv(&path[0], filters, kernel, stride, 1, false);
        self.push(NodeSpec::new(&path[1], NodeKind::Batchnorm));
        self.push(NodeSpec::new(&path[2], NodeKind::Relu));
        self.conv(&path[3], filters, 3, 1, 1, false);
        self.push(NodeSpec::new(&path[4], NodeKind::Batchnorm));
        let add = format!("{id}_add");
        self.push(NodeSpec::new(&add, NodeKind::plain_add()));
        let mut shortcut = entry;
        if downsample {
            let pool = format!("{id}_sc_pool");
            self.push_from(&shortcut, NodeSpec::new(&pool, NodeKind::Pool { mode: PoolMode::Avg, window: 2, stride: 2 }));
            let proj = format!("{id}_sc_proj");
            self.push_from(&pool, NodeSpec::new(&proj, NodeKind::Conv { filters, kernel: 1, stride: 1, padding: 0, bias: false }));
            shortcut = proj;
            self.h /= 2;
        }
        self.spec.edges.push(Edge::new(&shortcut, &add));
        self.last = add;
        self.push(NodeSpec::new(format!("{id}_out"), NodeKind::Relu));
        let branch = format!("{id}_branch");
        self.spec.branches.push(BranchGroup { id: branch.clone(), nodes: path.to_vec() });
        self.spec.blocks.push(BlockGroup { id: id.to_string(), branches: vec![branch] });
    }

    fn finish(self) -> ModelSpec {
        self.spec
    }
}

fn vgg(name: &str, input_shape: &[usize], classes: usize, stages: &[&[usize]], hidden: &[usize]) -> ModelSpec {
    let mut b = Builder::new(name, input_shape, classes);
    for (s, widths) in stages.iter().enumerate() {
        for (i, &w) in widths.iter().enumerate() {
            let tag = format!("{}_{}", s + 1, i + 1);
            b.stack([&format!("conv{tag}"), &format!("bn{tag}"), &format!("relu{tag}")], w, true);
        }
        b.stage_pool(&format!("pool{}", s + 1));
    }
    b.global_pool();
    for (i, &units) in hidden.iter().enumerate() {
        let tag = i + 1;
        b.dense(&format!("fc{tag}"), units);
        b.push(NodeSpec::new(format!("bn_fc{tag}"), NodeKind::Batchnorm));
        b.push(NodeSpec::new(format!("relu_fc{tag}"), NodeKind::Relu));
        if i == 0 {
            b.push(NodeSpec::new("dropout", NodeKind::Dropout { rate: 0.5 }));
        }
    }
    b.dense(&format!("fc{}", hidden.len() + 1), classes);
    b.finish()
}

/// VGG-16 with batchnorm after every trainable layer and dropout 0.5 after
/// the first dense layer.
pub fn vgg16_custom(input_shape: &[usize], classes: usize) -> ModelSpec {
    vgg("vgg16_custom", input_shape, classes, &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]], &[512, 512])
}

pub fn mini_vgg8(input_shape: &[usize], classes: usize) -> ModelSpec {
    vgg("mini_vgg8", input_shape, classes, &[&[8, 8], &[16, 16], &[32, 32]], &[32])
}

fn resnet(name: &str, input_shape: &[usize], classes: usize, stages: &[(usize, usize)]) -> ModelSpec {
    let mut b = Builder::new(name, input_shape, classes);
    b.stack(["stem_conv", "stem_bn", "stem_relu"], stages[0].0, false);
    for (s, &(width, blocks)) in stages.iter().enumerate() {
        for i in 0..blocks {
            b.residual_block(&format!("s{}b{}", s + 1, i + 1), width, s > 0 && i == 0);
        }
    }
    b.global_pool();
    b.dense("fc", classes);
    b.finish()
}

/// Three stages of nine residual blocks (16, 32, 64 filters). Downsampling
/// blocks use a 4x4 stride-2 conv and an avg-pool + 1x1 projection shortcut.
pub fn resnet56(input_shape: &[usize], classes: usize) -> ModelSpec {
    resnet("resnet56", input_shape, classes, &[(16, 9), (32, 9), (64, 9)])
}

/// Identity block, downsampling block, identity block.
pub fn mini_resnet(input_shape: &[usize], classes: usize) -> ModelSpec {
    let mut b = Builder::new("mini_resnet", input_shape, classes);
    b.stack(["stem_conv", "stem_bn", "stem_relu"], 8, false);
    b.residual_block("block1", 8, false);
    b.residual_block("block2", 16, true);
    b.residual_block("block3", 16, false);
    b.global_pool();
    b.dense("fc", classes);
    b.finish()
}

pub fn default_input(name: &str) -> Option<(Vec<usize>, usize)> {
    match name {
        "vgg16_custom" | "resnet56" => Some((vec![3, 32, 32], 10)),
        "mini_vgg8" => Some((vec![1, 28, 28], 10)),
        "mini_resnet" => Some((vec![1, 8, 8], 2)),
        _ => None,
    }
}

fn unknown(name: &str) -> Error {
    Error::Config(format!("unknown builtin model '{name}' (available: {})", BUILTIN_NAMES.join(", ")))
}

pub fn builtin_with(name: &str, input_shape: &[usize], classes: usize) -> Result<ModelSpec> {
    let spec = match name {
        "vgg16_custom" => vgg16_custom(input_shape, classes),
        "resnet56" => resnet56(input_shape, classes),
        "mini_vgg8" => mini_vgg8(input_shape, classes),
        "mini_resnet" => mini_resnet(input_shape, classes),
        _ => return Err(unknown(name)),
    };
    Ok(spec)
}

/// A catalog spec at its default input shape and class count.
pub fn builtin(name: &str) -> Result<ModelSpec> {
    let (shape, classes) = default_input(name).ok_or_else(|| unknown(name))?;
    builtin_with(name, &shape, classes)
}

pub fn builtin_specs() -> Vec<ModelSpec> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("catalog names resolve")).collect()
}
