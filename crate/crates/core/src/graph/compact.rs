use std::collections::BTreeMap;

use thiserror::Error;

use super::{ComputationGraph, GraphError, Model, ModelError, NodeId, OpKind};
use crate::combing::{validate_masks, MaskReport, PruningScheme};
use crate::importance::MaskSet;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CompactError {
    #[error("masks are inconsistent: {0}")]
    Inconsistent(#[from] MaskReport),
    #[error("masks remove every channel of `{0}`")]
    EmptyLayer(NodeId),
    #[error("scheme was built for a different graph")]
    SchemeMismatch,
    #[error("grouped conv `{0}` would lose different columns in different groups")]
    UnevenGroups(NodeId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Removes gated-off channels from weights and channel metadata.
///
/// The result computes the same outputs as the gated forward pass of
/// `model` under `masks`.
pub fn compact(model: &Model, scheme: &PruningScheme, masks: &MaskSet) -> Result<Model, CompactError> {
    let graph = &model.graph;
    if !scheme.matches(graph) {
        return Err(CompactError::SchemeMismatch);
    }
    validate_masks(scheme, masks)?;

    // Output channels kept by each producer and rider, and input channels
    // kept by each consumer.
    let mut out_keep: BTreeMap<NodeId, Vec<bool>> = BTreeMap::new();
    let mut in_keep: BTreeMap<NodeId, Vec<bool>> = BTreeMap::new();
    for g in &scheme.groups {
        let gates = masks.group_gates(g);
        if gates.iter().all(|&x| x) {
            continue;
        }
        if gates.iter().all(|&x| !x) {
            return Err(CompactError::EmptyLayer(g.producers[0].clone()));
        }
        for p in &g.producers {
            out_keep.insert(p.clone(), gates.to_vec());
        }
        for r in &g.riders {
            let n = graph.node(&r.op).unwrap().out_channels();
            let keep = out_keep.entry(r.op.clone()).or_insert_with(|| vec![true; n]);
            for (c, &x) in gates.iter().enumerate() {
                keep[r.slice[0] + c] &= x;
            }
        }
        for c in &g.consumers {
            let n = graph.node(&c.op).unwrap().in_channels;
            let keep = in_keep.entry(c.op.clone()).or_insert_with(|| vec![true; n]);
            for (i, &x) in gates.iter().enumerate() {
                keep[c.slice[0] + i] &= x;
            }
        }
    }

    let indices = |keep: &[bool]| -> Vec<usize> { (0..keep.len()).filter(|&i| keep[i]).collect() };
    let mut params = model.params.clone();
    let mut decls = Vec::new();
    for node in graph.iter() {
        let id = &node.id;
        let mut kind = node.kind.clone();
        let select = |params: &mut super::ParamStore, role: &str, axis: usize, keep: &[usize]| -> Result<(), CompactError> {
            let name = format!("{id}.{role}");
            if let Some(t) = params.get(&name) {
                let t: Tensor = t.select(axis, keep).expect("keep indices in range");
                params.insert(name, t);
            }
            Ok(())
        };
        if let Some(keep) = out_keep.get(id) {
            let k = indices(keep);
            if k.is_empty() {
                return Err(CompactError::EmptyLayer(id.clone()));
            }
            match &mut kind {
                OpKind::Linear { out_features, .. } => *out_features = k.len(),
                OpKind::Conv { out_channels, groups, .. } => {
                    if node.is_depthwise() {
                        *groups = k.len();
                    }
                    *out_channels = k.len();
                }
                OpKind::Norm => {
                    select(&mut params, "gamma", 0, &k)?;
                    select(&mut params, "beta", 0, &k)?;
                }
                _ => unreachable!("only stop ops and norms own output channels"),
            }
            if node.kind.is_stop() {
                select(&mut params, "weight", 0, &k)?;
                select(&mut params, "bias", 0, &k)?;
            }
        }
        if let Some(keep) = in_keep.get(id) {
            match &node.kind {
                OpKind::Linear { .. } => select(&mut params, "weight", 1, &indices(keep))?,
                OpKind::Conv { .. } if node.is_depthwise() => {}
                OpKind::Conv { groups, .. } => {
                    let block = node.in_channels / groups;
                    let cols: Vec<usize> = (0..block).filter(|&j| keep[j]).collect();
                    for b in 1..*groups {
                        let other: Vec<usize> = (0..block).filter(|&j| keep[b * block + j]).collect();
                        if other != cols {
                            return Err(CompactError::UnevenGroups(id.clone()));
                        }
                    }
                    select(&mut params, "weight", 1, &cols)?;
                }
                _ => unreachable!("consumers are stop ops"),
            }
        }
        decls.push((id.clone(), kind, node.inputs.clone()));
    }
    let graph = ComputationGraph::from_decls(decls)?;
    Ok(Model::new(graph, params)?)
}
