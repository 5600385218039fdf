//! Computation-graph IR: typed operations with channel metadata.
//!
//! Activations carry one of four layouts. The channel axis is fixed per
//! layout: axis 1 for `flat` `[b, c]`, `image` `[b, c, h, w]` and `seq`
//! `[b, c, t]`; axis 2 for `tokens` `[b, t, c]`.

mod compact;
mod exec;
mod model;
mod parse;

pub use compact::{compact, CompactError};
pub use exec::{execute, execute_gated, forward, ExecError, Execution, Forward, NodeGates};
pub use model::{init_params, Model, ModelError, ParamStore};
pub use parse::{parse_graph, serialize_graph};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Flat,
    Image,
    Seq,
    Tokens,
}

impl Layout {
    pub fn channel_axis(self) -> usize {
        match self {
            Layout::Flat | Layout::Image | Layout::Seq => 1,
            Layout::Tokens => 2,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Layout::Flat => 2,
            Layout::Seq | Layout::Tokens => 3,
            Layout::Image => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Flat => "flat",
            Layout::Image => "image",
            Layout::Seq => "seq",
            Layout::Tokens => "tokens",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "flat" => Layout::Flat,
            "image" => Layout::Image,
            "seq" => Layout::Seq,
            "tokens" => Layout::Tokens,
            _ => return None,
        })
    }
}

/// Shape of one activation, excluding the batch axis.
///
/// `height`/`width` are the image extent for `image`; for `seq`/`tokens`
/// `height` is the token count and `width` is 1; for `flat` both are 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ActShape {
    pub layout: Layout,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActShape {
    pub fn flat(channels: usize) -> Self {
        Self { layout: Layout::Flat, channels, height: 1, width: 1 }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self { layout: Layout::Image, channels, height, width }
    }

    pub fn seq(channels: usize, tokens: usize) -> Self {
        Self { layout: Layout::Seq, channels, height: tokens, width: 1 }
    }

    pub fn tokens(channels: usize, tokens: usize) -> Self {
        Self { layout: Layout::Tokens, channels, height: tokens, width: 1 }
    }

    /// Elements per channel per sample (`h × w`, token count, or 1).
    pub fn spatial_size(&self) -> usize {
        self.height * self.width
    }

    pub fn tensor_shape(&self, batch: usize) -> Vec<usize> {
        match self.layout {
            Layout::Flat => vec![batch, self.channels],
            Layout::Image => vec![batch, self.channels, self.height, self.width],
            Layout::Seq => vec![batch, self.channels, self.height],
            Layout::Tokens => vec![batch, self.height, self.channels],
        }
    }

    /// Parameter shape of a per-sample source with this activation shape.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.tensor_shape(1)[1..].to_vec()
    }

    pub fn numel(&self) -> usize {
        self.channels * self.spatial_size()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// Non-overlapping window average.
    Avg { kernel: usize },
    /// Spatial mean, `image -> flat`.
    GlobalAvg,
    /// Nearest-neighbour upsampling.
    Upsample { factor: usize },
}

/// Tensor-axis selector for concat and softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisSel {
    Channel,
    /// Token axis of `seq`/`tokens`.
    Token,
    /// Last tensor axis.
    Last,
}

impl AxisSel {
    pub fn name(self) -> &'static str {
        match self {
            AxisSel::Channel => "channel",
            AxisSel::Token => "token",
            AxisSel::Last => "last",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "channel" => AxisSel::Channel,
            "token" => AxisSel::Token,
            "last" => AxisSel::Last,
            _ => return None,
        })
    }

    /// Resolves to a tensor axis for `layout`, if the selector applies.
    pub fn resolve(self, layout: Layout) -> Option<usize> {
        match self {
            AxisSel::Channel => Some(layout.channel_axis()),
            AxisSel::Last => Some(layout.rank() - 1),
            AxisSel::Token => match layout {
                Layout::Seq => Some(2),
                Layout::Tokens => Some(1),
                _ => None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    // sources
    Input { shape: ActShape },
    /// Learned per-sample tensor, broadcast over the batch.
    Parameter { shape: ActShape },
    // stop ops
    Linear { out_features: usize, bias: bool },
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize, groups: usize, bias: bool },
    // coupling ops
    Add,
    /// `a · b` or `a · bᵀ` over `tokens` operands.
    MatMul { transpose_b: bool },
    Concat { axis: AxisSel },
    // pass-through ops
    Act(Activation),
    /// Per-channel affine `gamma · x + beta` (inference-form batch norm).
    Norm,
    /// `image <-> seq`; `height`/`width` describe the image side.
    Reshape { to: Layout, height: usize, width: usize },
    /// `seq <-> tokens`.
    Transpose,
    Pool(Pool),
    Softmax { axis: AxisSel, temperature: f64 },
    // sinks
    Output,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCategory {
    Source,
    Stop,
    Coupling,
    PassThrough,
    Sink,
}

impl OpKind {
    pub fn category(&self) -> OpCategory {
        match self {
            OpKind::Input { .. } | OpKind::Parameter { .. } => OpCategory::Source,
            OpKind::Linear { .. } | OpKind::Conv { .. } => OpCategory::Stop,
            OpKind::Add | OpKind::MatMul { .. } | OpKind::Concat { .. } => OpCategory::Coupling,
            OpKind::Act(_)
            | OpKind::Norm
            | OpKind::Reshape { .. }
            | OpKind::Transpose
            | OpKind::Pool(_)
            | OpKind::Softmax { .. } => OpCategory::PassThrough,
            OpKind::Output | OpKind::Loss => OpCategory::Sink,
        }
    }

    pub fn is_stop(&self) -> bool {
        self.category() == OpCategory::Stop
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Parameter { .. } => "param",
            OpKind::Linear { .. } => "linear",
            OpKind::Conv { .. } => "conv",
            OpKind::Add => "add",
            OpKind::MatMul { .. } => "matmul",
            OpKind::Concat { .. } => "concat",
            OpKind::Act(Activation::Relu) => "relu",
            OpKind::Act(Activation::Gelu) => "gelu",
            OpKind::Norm => "norm",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Pool(Pool::Avg { .. }) => "avgpool",
            OpKind::Pool(Pool::GlobalAvg) => "globalpool",
            OpKind::Pool(Pool::Upsample { .. }) => "upsample",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Output => "output",
            OpKind::Loss => "loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    /// Inferred output shape (batch excluded).
    pub shape: ActShape,
    /// Channel count of the (first) input, for stop ops.
    pub in_channels: usize,
}

impl OpNode {
    pub fn out_channels(&self) -> usize {
        self.shape.channels
    }

    /// `(height, width)` of the output, or `None` for flat activations.
    pub fn out_spatial(&self) -> Option<(usize, usize)> {
        match self.shape.layout {
            Layout::Flat => None,
            _ => Some((self.shape.height, self.shape.width)),
        }
    }

    /// Names of the learnable tensors this node owns, with their shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let id = &self.id;
        match &self.kind {
            OpKind::Linear { out_features, bias } => {
                let mut v = vec![(format!("{id}.weight"), vec![*out_features, self.in_channels])];
                if *bias {
                    v.push((format!("{id}.bias"), vec![*out_features]));
                }
                v
            }
            OpKind::Conv { out_channels, kernel, groups, bias, .. } => {
                let mut v = vec![(
                    format!("{id}.weight"),
                    vec![*out_channels, self.in_channels / groups, *kernel, *kernel],
                )];
                if *bias {
                    v.push((format!("{id}.bias"), vec![*out_channels]));
                }
                v
            }
            OpKind::Norm => vec![
                (format!("{id}.gamma"), vec![self.shape.channels]),
                (format!("{id}.beta"), vec![self.shape.channels]),
            ],
            OpKind::Parameter { shape } => vec![(format!("{id}.value"), shape.sample_shape())],
            _ => Vec::new(),
        }
    }

    /// True for a conv whose every group maps one input channel to one
    /// output channel.
    pub fn is_depthwise(&self) -> bool {
        matches!(self.kind, OpKind::Conv { out_channels, groups, .. }
            if groups > 1 && groups == self.in_channels && groups == out_channels)
    }

    /// Group count of a grouped (non-depthwise) conv, else 1.
    pub fn channel_groups(&self) -> usize {
        match self.kind {
            OpKind::Conv { groups, .. } if !self.is_depthwise() => groups,
            _ => 1,
        }
    }

    /// Learnable parameter count of a stop op.
    pub fn stop_param_count(&self) -> usize {
        match &self.kind {
            OpKind::Linear { .. } | OpKind::Conv { .. } => {
                self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("node {node}: unknown op kind `{kind}`")]
    UnknownOpKind { node: NodeId, kind: String },
    #[error("node {node}: duplicate node id")]
    DuplicateNode { node: NodeId },
    #[error("node {node}: input `{input}` does not exist")]
    DanglingInput { node: NodeId, input: NodeId },
    #[error("cycle detected through nodes {0:?}")]
    Cycle(Vec<NodeId>),
    #[error("node {node}: channel mismatch: {reason}")]
    ChannelMismatch { node: NodeId, reason: String },
    #[error("node {node}: invalid attributes: {reason}")]
    InvalidAttr { node: NodeId, reason: String },
    #[error("node {node}: {reason}")]
    Invalid { node: NodeId, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputationGraph {
    nodes: BTreeMap<NodeId, OpNode>,
    topo_order: Vec<NodeId>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

/// Declaration of a node before validation: id, kind, input ids.
pub type NodeDecl = (NodeId, OpKind, Vec<NodeId>);

impl ComputationGraph {
    /// Validates declarations and infers every node's output shape.
    ///
    /// Declaration order breaks ties in the topological order, so a document
    /// that is already sorted keeps its order.
    pub fn from_decls(decls: Vec<NodeDecl>) -> Result<Self, GraphError> {
        let mut position = BTreeMap::new();
        for (i, (id, _, _)) in decls.iter().enumerate() {
            if position.insert(id.clone(), i).is_some() {
                return Err(GraphError::DuplicateNode { node: id.clone() });
            }
        }
        for (id, kind, inputs) in &decls {
            for inp in inputs {
                if !position.contains_key(inp) {
                    return Err(GraphError::DanglingInput { node: id.clone(), input: inp.clone() });
                }
            }
            let arity_ok = match kind.category() {
                OpCategory::Source => inputs.is_empty(),
                OpCategory::Coupling => match kind {
                    OpKind::MatMul { .. } => inputs.len() == 2,
                    _ => inputs.len() >= 2,
                },
                _ => inputs.len() == 1,
            };
            if !arity_ok {
                return Err(GraphError::Invalid {
                    node: id.clone(),
                    reason: format!("{} does not accept {} inputs", kind.name(), inputs.len()),
                });
            }
        }

        // Kahn's algorithm, smallest declaration index first.
        let n = decls.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, (_, _, inputs)) in decls.iter().enumerate() {
            for inp in inputs {
                let j = position[inp];
                indegree[i] += 1;
                users[j].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).filter(|&i| indegree[i] > 0).map(|i| decls[i].0.clone()).collect();
            return Err(GraphError::Cycle(stuck));
        }

        let mut nodes: BTreeMap<NodeId, OpNode> = BTreeMap::new();
        let mut topo_order = Vec::with_capacity(n);
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for i in order {
            let (id, kind, ins) = &decls[i];
            let in_shapes: Vec<ActShape> = ins.iter().map(|x| nodes[x].shape).collect();
            let shape = infer_shape(id, kind, &in_shapes)?;
            match kind {
                OpKind::Input { .. } => inputs.push(id.clone()),
                OpKind::Output | OpKind::Loss => outputs.push(id.clone()),
                _ => {}
            }
            let in_channels = in_shapes.first().map_or(0, |s| s.channels);
            nodes.insert(
                id.clone(),
                OpNode { id: id.clone(), kind: kind.clone(), inputs: ins.clone(), shape, in_channels },
            );
            topo_order.push(id.clone());
        }
        if outputs.is_empty() {
            return Err(GraphError::Invalid { node: String::new(), reason: "graph has no output node".into() });
        }
        Ok(Self { nodes, topo_order, inputs, outputs })
    }

    pub fn node(&self, id: &str) -> Option<&OpNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, OpNode> {
        &self.nodes
    }

    pub fn topo_order(&self) -> &[NodeId] {
        &self.topo_order
    }

    /// Nodes in topological order.
    pub fn iter(&self) -> impl Iterator<Item = &OpNode> {
        self.topo_order.iter().map(|id| &self.nodes[id])
    }

    pub fn named_inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn named_outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// `(user id, input slot)` pairs consuming `id`, in topological order.
    pub fn users(&self, id: &str) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        for n in self.iter() {
            for (slot, inp) in n.inputs.iter().enumerate() {
                if inp == id {
                    out.push((n.id.clone(), slot));
                }
            }
        }
        out
    }

    pub fn stop_ops(&self) -> impl Iterator<Item = &OpNode> {
        self.iter().filter(|n| n.kind.is_stop())
    }

    pub fn decls(&self) -> Vec<NodeDecl> {
        self.iter().map(|n| (n.id.clone(), n.kind.clone(), n.inputs.clone())).collect()
    }

    /// Total learnable parameters of all stop ops.
    pub fn stop_param_count(&self) -> usize {
        self.stop_ops().map(OpNode::stop_param_count).sum()
    }

    /// Multiply-accumulates of one forward pass per sample.
    ///
    /// Counts linear, conv and matmul ops; everything else is treated as
    /// free.
    pub fn macs_per_sample(&self) -> u64 {
        self.iter()
            .map(|n| match &n.kind {
                OpKind::Linear { out_features, .. } => {
                    (n.in_channels * out_features * n.shape.spatial_size()) as u64
                }
                OpKind::Conv { out_channels, kernel, groups, .. } => {
                    (out_channels * (n.in_channels / groups) * kernel * kernel * n.shape.spatial_size()) as u64
                }
                OpKind::MatMul { .. } => {
                    let a = &self.nodes[&n.inputs[0]].shape;
                    (a.height * a.channels * n.shape.channels) as u64
                }
                _ => 0,
            })
            .sum()
    }
}

impl fmt::Display for ComputationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_graph(self))
    }
}

fn mismatch(node: &str, reason: String) -> GraphError {
    GraphError::ChannelMismatch { node: node.to_string(), reason }
}

fn invalid(node: &str, reason: String) -> GraphError {
    GraphError::Invalid { node: node.to_string(), reason }
}

fn attr_err(node: &str, reason: String) -> GraphError {
    GraphError::InvalidAttr { node: node.to_string(), reason }
}

fn infer_shape(id: &str, kind: &OpKind, ins: &[ActShape]) -> Result<ActShape, GraphError> {
    let first = ins.first().copied();
    let require_layout = |s: ActShape, allowed: &[Layout]| {
        if allowed.contains(&s.layout) {
            Ok(())
        } else {
            Err(invalid(id, format!("{} does not accept {} input", kind.name(), s.layout.name())))
        }
    };
    match kind {
        OpKind::Input { shape } | OpKind::Parameter { shape } => {
            if shape.channels == 0 || shape.height == 0 || shape.width == 0 {
                return Err(attr_err(id, "dimensions must be positive".into()));
            }
            let consistent = match shape.layout {
                Layout::Flat => shape.height == 1 && shape.width == 1,
                Layout::Seq | Layout::Tokens => shape.width == 1,
                Layout::Image => true,
            };
            if !consistent {
                return Err(attr_err(id, format!("extent {}x{} invalid for {} layout", shape.height, shape.width, shape.layout.name())));
            }
            Ok(*shape)
        }
        OpKind::Linear { out_features, .. } => {
            let s = first.unwrap();
            require_layout(s, &[Layout::Flat, Layout::Tokens])?;
            if *out_features == 0 {
                return Err(attr_err(id, "out must be positive".into()));
            }
            Ok(ActShape { channels: *out_features, ..s })
        }
        OpKind::Conv { out_channels, kernel, stride, padding, groups, .. } => {
            let s = first.unwrap();
            require_layout(s, &[Layout::Image])?;
            if *out_channels == 0 || *kernel == 0 || *stride == 0 || *groups == 0 {
                return Err(attr_err(id, "out, kernel, stride and groups must be positive".into()));
            }
            if s.channels % groups != 0 || out_channels % groups != 0 {
                return Err(mismatch(
                    id,
                    format!("groups={groups} must divide input channels {} and output channels {out_channels}", s.channels),
                ));
            }
            if s.height + 2 * padding < *kernel || s.width + 2 * padding < *kernel {
                return Err(attr_err(id, format!("kernel {kernel} exceeds padded input {}x{}", s.height, s.width)));
            }
            let oh = (s.height + 2 * padding - kernel) / stride + 1;
            let ow = (s.width + 2 * padding - kernel) / stride + 1;
            Ok(ActShape::image(*out_channels, oh, ow))
        }
        OpKind::Add => {
            let s = first.unwrap();
            for o in &ins[1..] {
                if o.channels != s.channels {
                    return Err(mismatch(id, format!("add inputs have {} and {} channels", s.channels, o.channels)));
                }
                if *o != s {
                    return Err(invalid(id, format!("add inputs have different shapes {s:?} and {o:?}")));
                }
            }
            Ok(s)
        }
        OpKind::MatMul { transpose_b } => {
            let (a, b) = (ins[0], ins[1]);
            require_layout(a, &[Layout::Tokens])?;
            require_layout(b, &[Layout::Tokens])?;
            if *transpose_b {
                if a.channels != b.channels {
                    return Err(mismatch(id, format!("contracted channels differ: {} vs {}", a.channels, b.channels)));
                }
                Ok(ActShape::tokens(b.height, a.height))
            } else {
                if a.channels != b.height {
                    return Err(mismatch(id, format!("contracted dims differ: {} channels vs {} tokens", a.channels, b.height)));
                }
                Ok(ActShape::tokens(b.channels, a.height))
            }
        }
        OpKind::Concat { axis } => {
            let s = first.unwrap();
            if ins.iter().any(|o| o.layout != s.layout) {
                return Err(invalid(id, "concat inputs have different layouts".into()));
            }
            match axis {
                AxisSel::Channel => {
                    if ins.iter().any(|o| o.height != s.height || o.width != s.width) {
                        return Err(invalid(id, "concat inputs differ outside the channel axis".into()));
                    }
                    Ok(ActShape { channels: ins.iter().map(|o| o.channels).sum(), ..s })
                }
                AxisSel::Token => {
                    require_layout(s, &[Layout::Seq, Layout::Tokens])?;
                    if ins.iter().any(|o| o.channels != s.channels) {
                        return Err(mismatch(id, "token concat inputs must have equal channels".into()));
                    }
                    Ok(ActShape { height: ins.iter().map(|o| o.height).sum(), ..s })
                }
                AxisSel::Last => Err(attr_err(id, "concat axis must be channel or token".into())),
            }
        }
        OpKind::Act(_) | OpKind::Norm | OpKind::Output | OpKind::Loss => Ok(first.unwrap()),
        OpKind::Softmax { axis, temperature } => {
            let s = first.unwrap();
            if !(*temperature > 0.0) {
                return Err(attr_err(id, format!("temperature must be positive, got {temperature}")));
            }
            if axis.resolve(s.layout).is_none() {
                return Err(attr_err(id, format!("axis {} undefined for {} layout", axis.name(), s.layout.name())));
            }
            Ok(s)
        }
        OpKind::Reshape { to, height, width } => {
            let s = first.unwrap();
            match (s.layout, to) {
                (Layout::Image, Layout::Seq) => Ok(ActShape::seq(s.channels, s.height * s.width)),
                (Layout::Seq, Layout::Image) => {
                    if height * width != s.height {
                        return Err(attr_err(id, format!("{height}x{width} does not hold {} tokens", s.height)));
                    }
                    Ok(ActShape::image(s.channels, *height, *width))
                }
                _ => Err(invalid(id, format!("reshape {} -> {} unsupported", s.layout.name(), to.name()))),
            }
        }
        OpKind::Transpose => {
            let s = first.unwrap();
            match s.layout {
                Layout::Seq => Ok(ActShape { layout: Layout::Tokens, ..s }),
                Layout::Tokens => Ok(ActShape { layout: Layout::Seq, ..s }),
                _ => Err(invalid(id, format!("transpose of {} unsupported", s.layout.name()))),
            }
        }
        OpKind::Pool(p) => {
            let s = first.unwrap();
            require_layout(s, &[Layout::Image])?;
            match p {
                Pool::Avg { kernel } => {
                    if *kernel == 0 || s.height % kernel != 0 || s.width % kernel != 0 {
                        return Err(attr_err(id, format!("window {kernel} does not tile {}x{}", s.height, s.width)));
                    }
                    Ok(ActShape::image(s.channels, s.height / kernel, s.width / kernel))
                }
                Pool::GlobalAvg => Ok(ActShape::flat(s.channels)),
                Pool::Upsample { factor } => {
                    if *factor == 0 {
                        return Err(attr_err(id, "factor must be positive".into()));
                    }
                    Ok(ActShape::image(s.channels, s.height * factor, s.width * factor))
                }
            }
        }
    }
}

/// Incremental construction of a graph in code.
#[derive(Default)]
pub struct GraphBuilder {
    decls: Vec<NodeDecl>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, id: &str, kind: OpKind, inputs: &[&str]) -> &mut Self {
        self.decls.push((id.to_string(), kind, inputs.iter().map(|s| s.to_string()).collect()));
        self
    }

    pub fn build(&self) -> Result<ComputationGraph, GraphError> {
        ComputationGraph::from_decls(self.decls.clone())
    }
}
