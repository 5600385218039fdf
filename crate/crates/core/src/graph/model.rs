use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::{ComputationGraph, OpKind};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {got:?}, graph expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("unexpected parameter `{0}`")]
    Unexpected(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Learnable tensors keyed `<node>.<role>` (`weight`, `bias`, `gamma`,
/// `beta`, `value`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore(pub BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.0.insert(name, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn total_len(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn content_hash(&self) -> String {
        checkpoint::content_hash(&self.0)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(checkpoint::save(path, &self.0)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(Self(checkpoint::load(path)?))
    }
}

/// A graph together with weights matching its parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: ComputationGraph,
    pub params: ParamStore,
}

impl Model {
    pub fn new(graph: ComputationGraph, params: ParamStore) -> Result<Self, ModelError> {
        let mut expected = BTreeMap::new();
        for node in graph.iter() {
            for (name, shape) in node.param_shapes() {
                expected.insert(name, shape);
            }
        }
        for (name, shape) in &expected {
            let t = params.get(name).ok_or_else(|| ModelError::Missing(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape { name: name.clone(), expected: shape.clone(), got: t.shape().to_vec() });
            }
        }
        if let Some(extra) = params.0.keys().find(|k| !expected.contains_key(*k)) {
            return Err(ModelError::Unexpected(extra.clone()));
        }
        Ok(Self { graph, params })
    }

    /// Parameters of stop ops (weights and biases).
    pub fn stop_param_count(&self) -> usize {
        self.graph.stop_param_count()
    }
}

/// He-normal weights, zero biases, unit `gamma`, zero `beta`.
pub fn init_params<R: Rng>(graph: &ComputationGraph, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::default();
    for node in graph.iter() {
        let fan_in = match &node.kind {
            OpKind::Linear { .. } => node.in_channels,
            OpKind::Conv { kernel, groups, .. } => node.in_channels / groups * kernel * kernel,
            _ => 1,
        };
        for (name, shape) in node.param_shapes() {
            let t = if name.ends_with(".weight") {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Tensor::from_fn(&shape, |_| normal.sample(rng))
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".value") {
                let normal = Normal::new(0.0, 0.02).unwrap();
                Tensor::from_fn(&shape, |_| normal.sample(rng))
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t);
        }
    }
    store
}
