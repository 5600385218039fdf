//! Dependency resolution: which stop ops must be pruned in lockstep.
//!
//! A producer's output channels flow through pass-through ops and through
//! couplings that keep the channel axis intact (element-wise add, channel
//! concat at a slice offset, the right operand of a plain matmul). The flow
//! ends at stop ops, which become consumers, and at sinks.
//!
//! Couplings that require equal channel counts bind the flows meeting there:
//! add, token-axis concat and the contracted axis of `a · bᵀ`. Depthwise
//! convs bind their input flow to their own output. Stop ops bound together,
//! transitively, form one coupling group.
//!
//! A group is unprunable when one of its flows reaches a sink, a softmax, the
//! contracted operand of `a · b`, or is bound to a flow that starts at a graph
//! input or parameter. Flows that cover only part of a coupled tensor (a
//! concat slice meeting an add, say) pin their group and the binding op, but
//! do not join the groups bound there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{AxisSel, ComputationGraph, NodeGates, NodeId, OpCategory, OpKind, OpNode};
use crate::importance::MaskSet;

/// Input-channel range `[start, end)` of a consumer fed by a group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Consumer {
    pub op: NodeId,
    pub slot: usize,
    pub slice: [usize; 2],
}

/// A per-channel affine op whose parameters are pruned with a group.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rider {
    pub op: NodeId,
    pub slice: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub id: usize,
    pub producers: Vec<NodeId>,
    pub coupling_ops: Vec<NodeId>,
    pub consumers: Vec<Consumer>,
    #[serde(default)]
    pub riders: Vec<Rider>,
    pub channels: usize,
    pub prunable: bool,
    /// Channels removed per pruning unit. Grouped convs force one channel
    /// per conv group.
    pub granularity: usize,
}

impl CouplingGroup {
    /// Number of pruning units.
    pub fn unit_count(&self) -> usize {
        self.channels / self.granularity
    }

    /// Channels of unit `u`: `u + j·(channels / granularity)` for every `j`.
    pub fn unit_channels(&self, u: usize) -> Vec<usize> {
        let stride = self.unit_count();
        (0..self.granularity).map(|j| u + j * stride).collect()
    }

    pub fn unit_of(&self, channel: usize) -> usize {
        channel % self.unit_count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningScheme {
    pub fingerprint: String,
    pub groups: Vec<CouplingGroup>,
}

impl PruningScheme {
    pub fn group(&self, id: usize) -> Option<&CouplingGroup> {
        self.groups.get(id)
    }

    /// Group whose producers include `op`.
    pub fn group_of(&self, op: &str) -> Option<&CouplingGroup> {
        self.groups.iter().find(|g| g.producers.iter().any(|p| p == op))
    }

    pub fn prunable_groups(&self) -> impl Iterator<Item = &CouplingGroup> {
        self.groups.iter().filter(|g| g.prunable)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scheme serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn matches(&self, graph: &ComputationGraph) -> bool {
        self.fingerprint == fingerprint(graph)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombError {
    #[error("coupled producers {nodes:?} have conflicting channel counts {channels:?}")]
    ChannelConflict { nodes: Vec<NodeId>, channels: Vec<usize> },
}

/// SHA-256 of the graph's serialized form.
pub fn fingerprint(graph: &ComputationGraph) -> String {
    hex::encode(Sha256::digest(graph.to_string().as_bytes()))
}

/// Everything one channel flow touches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowTrace {
    pub reached: BTreeSet<NodeId>,
    pub couplings: BTreeSet<NodeId>,
    /// Binding couplings and depthwise convs.
    pub links: BTreeSet<NodeId>,
    /// Bindings reached by a flow covering only part of the bound tensor.
    /// They pin the binding op without joining its group.
    pub partial_links: BTreeSet<NodeId>,
    pub consumers: BTreeSet<Consumer>,
    pub riders: BTreeSet<Rider>,
    pub pinned: bool,
    /// lcm of the group counts of grouped-conv consumers.
    pub granularity: usize,
}

impl FlowTrace {
    fn bind(&mut self, op: &NodeId, partial: bool) {
        if partial {
            self.pinned = true;
            self.partial_links.insert(op.clone());
        } else {
            self.links.insert(op.clone());
        }
    }
}

type UserIndex = BTreeMap<NodeId, Vec<(NodeId, usize)>>;

fn user_index(graph: &ComputationGraph) -> UserIndex {
    let mut idx: UserIndex = graph.nodes().keys().map(|k| (k.clone(), Vec::new())).collect();
    for n in graph.iter() {
        for (slot, inp) in n.inputs.iter().enumerate() {
            idx.get_mut(inp).unwrap().push((n.id.clone(), slot));
        }
    }
    idx
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn trace_with(graph: &ComputationGraph, users: &UserIndex, start: &OpNode) -> FlowTrace {
    let width = start.out_channels();
    let mut t = FlowTrace { granularity: 1, ..Default::default() };
    let mut seen: BTreeSet<(NodeId, usize)> = BTreeSet::new();
    let mut stack = vec![(start.id.clone(), 0usize)];
    while let Some((cur, off)) = stack.pop() {
        if !seen.insert((cur.clone(), off)) {
            continue;
        }
        let partial = off != 0 || width != graph.node(&cur).unwrap().out_channels();
        for (uid, slot) in &users[&cur] {
            let u = graph.node(uid).unwrap();
            t.reached.insert(uid.clone());
            match &u.kind {
                OpKind::Linear { .. } | OpKind::Conv { .. } => {
                    t.consumers.insert(Consumer { op: uid.clone(), slot: *slot, slice: [off, off + width] });
                    if u.is_depthwise() {
                        t.bind(uid, partial);
                    } else if u.channel_groups() > 1 {
                        if partial {
                            t.pinned = true;
                        } else {
                            t.granularity = lcm(t.granularity, u.channel_groups());
                        }
                    }
                }
                OpKind::Add => {
                    t.couplings.insert(uid.clone());
                    t.bind(uid, partial);
                    stack.push((uid.clone(), off));
                }
                OpKind::Concat { axis: AxisSel::Channel } => {
                    t.couplings.insert(uid.clone());
                    let before: usize =
                        u.inputs[..*slot].iter().map(|i| graph.node(i).unwrap().out_channels()).sum();
                    stack.push((uid.clone(), off + before));
                }
                OpKind::Concat { .. } => {
                    t.couplings.insert(uid.clone());
                    t.bind(uid, partial);
                    stack.push((uid.clone(), off));
                }
                OpKind::MatMul { transpose_b: true } => {
                    t.couplings.insert(uid.clone());
                    t.bind(uid, partial);
                }
                OpKind::MatMul { transpose_b: false } => {
                    t.couplings.insert(uid.clone());
                    if *slot == 0 {
                        t.pinned = true;
                    } else {
                        stack.push((uid.clone(), off));
                    }
                }
                OpKind::Softmax { .. } | OpKind::Output | OpKind::Loss => t.pinned = true,
                OpKind::Norm => {
                    t.riders.insert(Rider { op: uid.clone(), slice: [off, off + width] });
                    stack.push((uid.clone(), off));
                }
                OpKind::Act(_) | OpKind::Reshape { .. } | OpKind::Transpose | OpKind::Pool(_) => {
                    stack.push((uid.clone(), off));
                }
                OpKind::Input { .. } | OpKind::Parameter { .. } => unreachable!("sources have no inputs"),
            }
        }
    }
    t
}

/// Follows the output channels of `node` until every path ends.
pub fn trace_flow(graph: &ComputationGraph, node: &str) -> FlowTrace {
    let users = user_index(graph);
    trace_with(graph, &users, graph.node(node).expect("node exists"))
}

/// Nodes reached by the channel flow of `node`, including the stop op,
/// sink or binding coupling that ends each path.
pub fn direct_successors(graph: &ComputationGraph, node: &str) -> BTreeSet<NodeId> {
    trace_flow(graph, node).reached
}

/// Coupling ops reached by the channel flow of a stop op.
pub fn following_couplings(graph: &ComputationGraph, stop_op: &str) -> BTreeSet<NodeId> {
    trace_flow(graph, stop_op).couplings
}

/// Nodes whose output channels are fixed: sources, and `a · bᵀ` whose
/// channels are the token axis of `b`.
fn is_origin(node: &OpNode) -> bool {
    node.kind.category() == OpCategory::Source || matches!(node.kind, OpKind::MatMul { transpose_b: true })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Partitions the stop ops of `graph` into coupling groups.
pub fn build_coupling_groups(graph: &ComputationGraph) -> Result<PruningScheme, CombError> {
    let users = user_index(graph);
    let ids: Vec<&NodeId> = graph.nodes().keys().collect();
    let index: BTreeMap<&NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut uf = UnionFind::new(ids.len());
    let mut pinned: Vec<usize> = Vec::new();

    let mut traces: BTreeMap<NodeId, FlowTrace> = BTreeMap::new();
    for node in graph.iter() {
        if node.kind.is_stop() {
            let t = trace_with(graph, &users, node);
            let me = index[&node.id];
            for l in &t.links {
                uf.union(me, index[l]);
            }
            pinned.extend(t.partial_links.iter().map(|l| index[l]));
            if t.pinned {
                pinned.push(me);
            }
            traces.insert(node.id.clone(), t);
        } else if is_origin(node) {
            let t = trace_with(graph, &users, node);
            pinned.extend(t.links.iter().chain(&t.partial_links).map(|l| index[l]));
        }
    }

    let mut components: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for id in traces.keys() {
        components.entry(uf.find(index[id])).or_default().push(id.clone());
    }
    let pinned_roots: BTreeSet<usize> = pinned.into_iter().map(|i| uf.find(i)).collect();
    let mut groups = Vec::new();
    for (root, mut producers) in components {
        producers.sort();
        let channels: Vec<usize> = producers.iter().map(|p| graph.node(p).unwrap().out_channels()).collect();
        if channels.iter().any(|&c| c != channels[0]) {
            return Err(CombError::ChannelConflict { nodes: producers, channels });
        }
        let mut coupling_ops = BTreeSet::new();
        let mut consumers = BTreeSet::new();
        let mut riders = BTreeSet::new();
        let mut granularity = 1;
        for p in &producers {
            let t = &traces[p];
            coupling_ops.extend(t.couplings.iter().cloned());
            consumers.extend(t.consumers.iter().cloned());
            riders.extend(t.riders.iter().cloned());
            granularity = lcm(granularity, t.granularity);
            granularity = lcm(granularity, graph.node(p).unwrap().channel_groups());
        }
        groups.push(CouplingGroup {
            id: 0,
            producers,
            coupling_ops: coupling_ops.into_iter().collect(),
            consumers: consumers.into_iter().collect(),
            riders: riders.into_iter().collect(),
            channels: channels[0],
            prunable: !pinned_roots.contains(&root),
            granularity,
        });
    }
    groups.sort_by(|a, b| a.producers[0].cmp(&b.producers[0]));
    for (i, g) in groups.iter_mut().enumerate() {
        g.id = i;
    }
    Ok(PruningScheme { fingerprint: fingerprint(graph), groups })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationReason {
    MissingMask,
    WrongLength { expected: usize, got: usize },
    /// Differs from the group's first producer at these channels.
    Divergent,
    /// The group is unprunable but these channels are gated off.
    Unprunable,
    /// Only part of a pruning unit is gated off.
    PartialUnit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskViolation {
    pub group: usize,
    pub producer: NodeId,
    pub channels: Vec<usize>,
    pub reason: ViolationReason,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Error)]
pub struct MaskReport {
    pub violations: Vec<MaskViolation>,
}

impl fmt::Display for MaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mask violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "; group {} producer {}: {:?} at channels {:?}", v.group, v.producer, v.reason, v.channels)?;
        }
        Ok(())
    }
}

/// Checks that every group's producers carry identical, unit-aligned masks.
pub fn validate_masks(scheme: &PruningScheme, masks: &MaskSet) -> Result<(), MaskReport> {
    let mut violations = Vec::new();
    for g in &scheme.groups {
        let mut reference: Option<&[bool]> = None;
        for p in &g.producers {
            let violation = |channels, reason| MaskViolation { group: g.id, producer: p.clone(), channels, reason };
            let Some(m) = masks.get(p) else {
                violations.push(violation(Vec::new(), ViolationReason::MissingMask));
                continue;
            };
            if m.gates.len() != g.channels {
                violations.push(violation(
                    Vec::new(),
                    ViolationReason::WrongLength { expected: g.channels, got: m.gates.len() },
                ));
                continue;
            }
            match reference {
                None => reference = Some(&m.gates),
                Some(r) => {
                    let diff: Vec<usize> = (0..g.channels).filter(|&c| r[c] != m.gates[c]).collect();
                    if !diff.is_empty() {
                        violations.push(violation(diff, ViolationReason::Divergent));
                    }
                }
            }
            let off: Vec<usize> = (0..g.channels).filter(|&c| !m.gates[c]).collect();
            if !g.prunable && !off.is_empty() {
                violations.push(violation(off, ViolationReason::Unprunable));
                continue;
            }
            let partial: Vec<usize> = (0..g.unit_count())
                .filter(|&u| {
                    let ch = g.unit_channels(u);
                    ch.iter().any(|&c| m.gates[c]) && ch.iter().any(|&c| !m.gates[c])
                })
                .flat_map(|u| g.unit_channels(u))
                .collect();
            if !partial.is_empty() {
                violations.push(violation(partial, ViolationReason::PartialUnit));
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(MaskReport { violations })
    }
}

/// Output multipliers for the gated forward pass: each producer's mask, and
/// the masks of every group feeding a rider, placed at the rider's slices.
pub fn node_gates(graph: &ComputationGraph, scheme: &PruningScheme, masks: &MaskSet) -> NodeGates {
    let mut gates = NodeGates::default();
    for g in &scheme.groups {
        let Some(m) = g.producers.first().and_then(|p| masks.get(p)) else { continue };
        if m.gates.iter().all(|&x| x) {
            continue;
        }
        let v: Vec<f64> = m.gates.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        for p in &g.producers {
            gates.0.insert(p.clone(), v.clone());
        }
        for r in &g.riders {
            let n = graph.node(&r.op).unwrap().out_channels();
            let entry = gates.0.entry(r.op.clone()).or_insert_with(|| vec![1.0; n]);
            for (c, &x) in v.iter().enumerate() {
                entry[r.slice[0] + c] *= x;
            }
        }
    }
    gates
}
