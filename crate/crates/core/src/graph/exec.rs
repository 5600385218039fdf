use std::collections::BTreeMap;

use thiserror::Error;

use super::{Activation, Model, NodeId, OpKind, Pool};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("missing input `{0}`")]
    MissingInput(String),
    #[error("input `{input}` has shape {got:?}, expected {expected:?}")]
    InputShape { input: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("node {node}: produced shape {got:?}, declared {expected:?}")]
    Shape { node: NodeId, expected: Vec<usize>, got: Vec<usize> },
    #[error("node {node}: non-finite values reached a loss node")]
    NonFinite { node: NodeId },
    #[error("node {node}: missing parameter `{param}`")]
    MissingParam { node: NodeId, param: String },
    #[error("node {node}: {source}")]
    Tensor { node: NodeId, source: TensorError },
}

/// Per-node channel multipliers applied to the node's output.
///
/// The gated forward pass multiplies each listed node's output by its
/// vector along the channel axis; pruned channels carry a zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeGates(pub BTreeMap<NodeId, Vec<f64>>);

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub nodes: BTreeMap<NodeId, Var>,
    pub params: BTreeMap<String, Var>,
    pub batch: usize,
}

impl Forward {
    pub fn var(&self, id: &str) -> Option<Var> {
        self.nodes.get(id).copied()
    }
}

/// Records the forward pass of `model` on `tape`.
///
/// Parameters become leaves that require gradients iff `record_gradients`.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    inputs: &BTreeMap<String, Tensor>,
    gates: Option<&NodeGates>,
    record_gradients: bool,
) -> Result<Forward, ExecError> {
    let graph = &model.graph;
    let mut batch = None;
    for id in graph.named_inputs() {
        let t = inputs.get(id).ok_or_else(|| ExecError::MissingInput(id.clone()))?;
        let b = t.shape().first().copied().unwrap_or(0);
        let expected = graph.node(id).unwrap().shape.tensor_shape(b);
        if t.shape() != expected.as_slice() || batch.is_some_and(|x| x != b) {
            return Err(ExecError::InputShape {
                input: id.clone(),
                expected: graph.node(id).unwrap().shape.tensor_shape(batch.unwrap_or(b)),
                got: t.shape().to_vec(),
            });
        }
        batch = Some(b);
    }
    let batch = batch.unwrap_or(1);

    let mut params = BTreeMap::new();
    for (name, t) in model.params.iter() {
        params.insert(name.clone(), tape.leaf(t.clone(), record_gradients));
    }
    let mut vals: BTreeMap<NodeId, Var> = BTreeMap::new();
    for node in graph.iter() {
        let id = &node.id;
        let terr = |source: TensorError| ExecError::Tensor { node: id.clone(), source };
        let param = |role: &str| {
            let name = format!("{id}.{role}");
            params.get(&name).copied().ok_or(ExecError::MissingParam { node: id.clone(), param: name })
        };
        let ins: Vec<Var> = node.inputs.iter().map(|i| vals[i]).collect();
        let in_layout = node.inputs.first().map(|i| graph.node(i).unwrap().shape.layout);
        let mut v = match &node.kind {
            OpKind::Input { .. } => tape.constant(inputs[id].clone()),
            OpKind::Parameter { .. } => tape.broadcast_batch(param("value")?, batch).map_err(terr)?,
            OpKind::Linear { bias, .. } => {
                let y = tape.matmul(ins[0], param("weight")?, true).map_err(terr)?;
                if *bias {
                    let axis = node.shape.layout.channel_axis();
                    tape.add_channel(y, param("bias")?, axis).map_err(terr)?
                } else {
                    y
                }
            }
            OpKind::Conv { stride, padding, groups, bias, .. } => {
                let y = tape.conv2d(ins[0], param("weight")?, *stride, *padding, *groups).map_err(terr)?;
                if *bias {
                    tape.add_channel(y, param("bias")?, 1).map_err(terr)?
                } else {
                    y
                }
            }
            OpKind::Add => {
                let mut acc = ins[0];
                for &x in &ins[1..] {
                    acc = tape.add(acc, x).map_err(terr)?;
                }
                acc
            }
            OpKind::MatMul { transpose_b } => tape.matmul(ins[0], ins[1], *transpose_b).map_err(terr)?,
            OpKind::Concat { axis } => {
                let ax = axis.resolve(in_layout.unwrap()).unwrap();
                tape.concat(&ins, ax).map_err(terr)?
            }
            OpKind::Act(Activation::Relu) => tape.relu(ins[0]).map_err(terr)?,
            OpKind::Act(Activation::Gelu) => tape.gelu(ins[0]).map_err(terr)?,
            OpKind::Norm => {
                let axis = node.shape.layout.channel_axis();
                let y = tape.mul_channel(ins[0], param("gamma")?, axis).map_err(terr)?;
                tape.add_channel(y, param("beta")?, axis).map_err(terr)?
            }
            OpKind::Reshape { .. } => tape.reshape(ins[0], &node.shape.tensor_shape(batch)).map_err(terr)?,
            OpKind::Transpose => tape.permute(ins[0], &[0, 2, 1]).map_err(terr)?,
            OpKind::Pool(Pool::Avg { kernel }) => tape.avg_pool2d(ins[0], *kernel).map_err(terr)?,
            OpKind::Pool(Pool::GlobalAvg) => tape.global_avg_pool(ins[0]).map_err(terr)?,
            OpKind::Pool(Pool::Upsample { factor }) => tape.upsample2d(ins[0], *factor).map_err(terr)?,
            OpKind::Softmax { axis, temperature } => {
                let ax = axis.resolve(in_layout.unwrap()).unwrap();
                tape.softmax(ins[0], ax, *temperature).map_err(terr)?
            }
            OpKind::Output => ins[0],
            OpKind::Loss => {
                if !tape.value(ins[0]).is_finite() {
                    return Err(ExecError::NonFinite { node: id.clone() });
                }
                ins[0]
            }
        };
        if let Some(g) = gates.and_then(|g| g.0.get(id)) {
            let gv = tape.constant(Tensor::new(vec![g.len()], g.clone()).map_err(terr)?);
            v = tape.mul_channel(v, gv, node.shape.layout.channel_axis()).map_err(terr)?;
        }
        let expected = node.shape.tensor_shape(batch);
        if tape.value(v).shape() != expected.as_slice() {
            return Err(ExecError::Shape { node: id.clone(), expected, got: tape.value(v).shape().to_vec() });
        }
        vals.insert(id.clone(), v);
    }
    Ok(Forward { nodes: vals, params, batch })
}

/// One execution context: a tape plus the handles of a forward pass.
pub struct Execution {
    pub tape: Tape,
    pub forward: Forward,
    outputs: Vec<NodeId>,
}

impl Execution {
    /// Values of every named output.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|id| (id.clone(), self.tape.value(self.forward.nodes[id]).clone()))
            .collect()
    }

    pub fn output_var(&self, id: &str) -> Option<Var> {
        self.forward.var(id)
    }

    /// Gradient accumulated on parameter `name`, if any.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor> {
        self.forward.params.get(name).and_then(|&v| self.tape.grad(v))
    }
}

/// Runs the graph on named inputs.
///
/// With `record_gradients`, parameters are differentiable leaves and
/// `tape.backward` may be called on any scalar built from the outputs.
pub fn execute(
    model: &Model,
    inputs: &BTreeMap<String, Tensor>,
    record_gradients: bool,
) -> Result<Execution, ExecError> {
    let mut tape = Tape::new();
    let forward = forward(&mut tape, model, inputs, None, record_gradients)?;
    Ok(Execution { tape, forward, outputs: model.graph.named_outputs().to_vec() })
}

/// Gated variant of [`execute`].
pub fn execute_gated(
    model: &Model,
    inputs: &BTreeMap<String, Tensor>,
    gates: &NodeGates,
    record_gradients: bool,
) -> Result<Execution, ExecError> {
    let mut tape = Tape::new();
    let forward = forward(&mut tape, model, inputs, Some(gates), record_gradients)?;
    Ok(Execution { tape, forward, outputs: model.graph.named_outputs().to_vec() })
}
