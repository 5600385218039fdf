//! Channel importance from weights and their gradients.
//!
//! The score of output channel `c` of a weight `w` is
//! `(Σ_{i ∈ c} ∂L/∂w_i · w_i)²`, the squared gradient of the loss with
//! respect to a multiplicative gate on that channel. Scores are divided by
//! the layer's activation memory `b·h·w·(surviving channels)` and summed
//! over a pruning interval and over the producers of a coupling group.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::combing::{CouplingGroup, PruningScheme};
use crate::graph::{ComputationGraph, NodeId, OpNode};
use crate::tensor::{split_axis, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImportanceError {
    #[error("missing gradient for `{0}`")]
    MissingGradient(String),
    #[error("weight shape {weight:?} differs from gradient shape {grad:?}")]
    ShapeMismatch { weight: Vec<usize>, grad: Vec<usize> },
    #[error("channel axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite weight or gradient")]
    NonFinite,
    #[error("`{0}` has no surviving channels")]
    AllPruned(NodeId),
    #[error("channel {channel} of group {group} is already pruned")]
    Pruned { group: usize, channel: usize },
    #[error("no ledger entry for `{0}`")]
    UnknownOp(NodeId),
    #[error("score vector for `{op}` has length {got}, expected {expected}")]
    Length { op: NodeId, expected: usize, got: usize },
}

/// Binary gates on the output channels of one stop op.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMask {
    pub owner: NodeId,
    pub gates: Vec<bool>,
}

impl GateMask {
    pub fn ones(owner: &str, channels: usize) -> Self {
        Self { owner: owner.to_string(), gates: vec![true; channels] }
    }

    pub fn alive(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }
}

/// One gate mask per producer of every coupling group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSet(pub BTreeMap<NodeId, GateMask>);

impl MaskSet {
    pub fn all_ones(scheme: &PruningScheme) -> Self {
        let mut m = BTreeMap::new();
        for g in &scheme.groups {
            for p in &g.producers {
                m.insert(p.clone(), GateMask::ones(p, g.channels));
            }
        }
        Self(m)
    }

    pub fn get(&self, op: &str) -> Option<&GateMask> {
        self.0.get(op)
    }

    pub fn get_mut(&mut self, op: &str) -> Option<&mut GateMask> {
        self.0.get_mut(op)
    }

    /// Gates of the group's first producer.
    pub fn group_gates<'a>(&'a self, group: &CouplingGroup) -> &'a [bool] {
        &self.0[&group.producers[0]].gates
    }

    /// Gates `channels` off in every producer of `group`.
    pub fn prune_channels(&mut self, group: &CouplingGroup, channels: &[usize]) {
        for p in &group.producers {
            let m = self.0.get_mut(p).expect("mask for every producer");
            for &c in channels {
                m.gates[c] = false;
            }
        }
    }

    /// Units of `group` whose channels are all still gated on.
    pub fn alive_units(&self, group: &CouplingGroup) -> Vec<usize> {
        let gates = self.group_gates(group);
        (0..group.unit_count()).filter(|&u| group.unit_channels(u).iter().all(|&c| gates[c])).collect()
    }

    pub fn pruned_channels(&self, group: &CouplingGroup) -> usize {
        self.group_gates(group).iter().filter(|&&g| !g).count()
    }
}

/// `score[c] = (Σ grad·weight over channel c)²` along `channel_axis`.
pub fn channel_importance(weight: &Tensor, grad: &Tensor, channel_axis: usize) -> Result<Vec<f64>, ImportanceError> {
    if weight.shape() != grad.shape() {
        return Err(ImportanceError::ShapeMismatch { weight: weight.shape().to_vec(), grad: grad.shape().to_vec() });
    }
    if channel_axis >= weight.rank() {
        return Err(ImportanceError::Axis { axis: channel_axis, rank: weight.rank() });
    }
    if !weight.is_finite() || !grad.is_finite() {
        return Err(ImportanceError::NonFinite);
    }
    let (outer, dim, inner) = split_axis(weight.shape(), channel_axis);
    let (w, g) = (weight.data(), grad.data());
    let mut dots = vec![0.0; dim];
    for o in 0..outer {
        for (c, dot) in dots.iter_mut().enumerate() {
            let base = (o * dim + c) * inner;
            for i in base..base + inner {
                *dot += w[i] * g[i];
            }
        }
    }
    Ok(dots.into_iter().map(|d| d * d).collect())
}

/// Activation elements per channel of `op`'s output: `b·h·w`, with the
/// token count as `h·w` for sequence layouts and 1 for flat activations.
pub fn memory_single(op: &OpNode, batch: usize) -> f64 {
    (batch * op.shape.spatial_size()) as f64
}

/// Divides each score by `b·h·w·(surviving gates)`.
pub fn memory_normalize(scores: &[f64], op: &OpNode, gates: &GateMask, batch: usize) -> Result<Vec<f64>, ImportanceError> {
    let alive = gates.alive();
    if alive == 0 {
        return Err(ImportanceError::AllPruned(op.id.clone()));
    }
    let total = memory_single(op, batch) * alive as f64;
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Raw scores of every producer's weight, taken from `grad`.
pub fn producer_scores<'a>(
    graph: &ComputationGraph,
    scheme: &PruningScheme,
    weight: impl Fn(&str) -> Option<&'a Tensor>,
    grad: impl Fn(&str) -> Option<&'a Tensor>,
) -> Result<BTreeMap<NodeId, Vec<f64>>, ImportanceError> {
    let mut out = BTreeMap::new();
    for g in scheme.prunable_groups() {
        for p in &g.producers {
            debug_assert!(graph.node(p).is_some());
            let name = format!("{p}.weight");
            let w = weight(&name).ok_or_else(|| ImportanceError::MissingGradient(name.clone()))?;
            let gr = grad(&name).ok_or_else(|| ImportanceError::MissingGradient(name.clone()))?;
            out.insert(p.clone(), channel_importance(w, gr, 0)?);
        }
    }
    Ok(out)
}

/// Per-channel raw scores accumulated over one pruning interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceLedger {
    pub raw: BTreeMap<NodeId, Vec<f64>>,
    pub step_count: usize,
    /// `b·h·w` per producer.
    pub memory_cost: BTreeMap<NodeId, f64>,
}

impl ImportanceLedger {
    /// Tracks the producers of every prunable group.
    pub fn new(graph: &ComputationGraph, scheme: &PruningScheme, batch: usize) -> Self {
        let mut raw = BTreeMap::new();
        let mut memory_cost = BTreeMap::new();
        for g in scheme.prunable_groups() {
            for p in &g.producers {
                raw.insert(p.clone(), vec![0.0; g.channels]);
                memory_cost.insert(p.clone(), memory_single(graph.node(p).unwrap(), batch));
            }
        }
        Self { raw, step_count: 0, memory_cost }
    }

    pub fn accumulate(&mut self, step: &BTreeMap<NodeId, Vec<f64>>) -> Result<(), ImportanceError> {
        for (op, scores) in step {
            let acc = self.raw.get_mut(op).ok_or_else(|| ImportanceError::UnknownOp(op.clone()))?;
            if acc.len() != scores.len() {
                return Err(ImportanceError::Length { op: op.clone(), expected: acc.len(), got: scores.len() });
            }
            for (a, s) in acc.iter_mut().zip(scores) {
                *a += s;
            }
        }
        self.step_count += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        for v in self.raw.values_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step_count = 0;
    }

    /// Accumulated score of `op` divided by its current memory footprint.
    pub fn normalized(&self, op: &str, gates: &GateMask) -> Result<Vec<f64>, ImportanceError> {
        let raw = self.raw.get(op).ok_or_else(|| ImportanceError::UnknownOp(op.to_string()))?;
        let alive = gates.alive();
        if alive == 0 {
            return Err(ImportanceError::AllPruned(op.to_string()));
        }
        let total = self.memory_cost[op] * alive as f64;
        Ok(raw.iter().map(|s| s / total).collect())
    }

    /// Sum over the group's producers of the normalized score at `channel`.
    pub fn group_score(
        &self,
        scheme: &PruningScheme,
        masks: &MaskSet,
        group: usize,
        channel: usize,
    ) -> Result<f64, ImportanceError> {
        let g = &scheme.groups[group];
        let mut total = 0.0;
        for p in &g.producers {
            let m = masks.get(p).ok_or_else(|| ImportanceError::UnknownOp(p.clone()))?;
            if !m.gates[channel] {
                return Err(ImportanceError::Pruned { group, channel });
            }
            total += self.normalized(p, m)?[channel];
        }
        Ok(total)
    }

    /// Sum of `group_score` over the channels of a pruning unit.
    pub fn unit_score(&self, scheme: &PruningScheme, masks: &MaskSet, group: usize, unit: usize) -> Result<f64, ImportanceError> {
        scheme.groups[group].unit_channels(unit).iter().map(|&c| self.group_score(scheme, masks, group, c)).sum()
    }

    /// Surviving units of prunable groups, least important first; ties go
    /// to the lower group id, then the lower unit index.
    pub fn ranked_units(&self, scheme: &PruningScheme, masks: &MaskSet) -> Result<Vec<(f64, usize, usize)>, ImportanceError> {
        let mut out = Vec::new();
        for g in scheme.prunable_groups() {
            for u in masks.alive_units(g) {
                out.push((self.unit_score(scheme, masks, g.id, u)?, g.id, u));
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        Ok(out)
    }
}

/// One row of the diagnostic importance dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceRow {
    pub step: usize,
    pub group: usize,
    pub channel: usize,
    /// This step's raw score summed over producers.
    pub raw: f64,
    /// This step's normalized score summed over producers.
    pub normalized: f64,
    /// Group score accumulated so far in the interval.
    pub accumulated: f64,
}

/// Rows for one training step, taken after `step` was accumulated.
pub fn importance_rows(
    step_index: usize,
    step: &BTreeMap<NodeId, Vec<f64>>,
    ledger: &ImportanceLedger,
    scheme: &PruningScheme,
    masks: &MaskSet,
) -> Result<Vec<ImportanceRow>, ImportanceError> {
    let mut rows = Vec::new();
    for g in scheme.prunable_groups() {
        let gates = masks.group_gates(g);
        for c in (0..g.channels).filter(|&c| gates[c]) {
            let mut raw = 0.0;
            let mut normalized = 0.0;
            for p in &g.producers {
                let s = step.get(p).ok_or_else(|| ImportanceError::UnknownOp(p.clone()))?[c];
                let m = &masks.0[p];
                raw += s;
                normalized += s / (ledger.memory_cost[p] * m.alive() as f64);
            }
            let accumulated = ledger.group_score(scheme, masks, g.id, c)?;
            rows.push(ImportanceRow { step: step_index, group: g.id, channel: c, raw, normalized, accumulated });
        }
    }
    Ok(rows)
}

pub fn write_importance_csv<W: Write>(w: W, rows: &[ImportanceRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
