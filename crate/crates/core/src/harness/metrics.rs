use serde::{Deserialize, Serialize};

use crate::graph::{execute, execute_gated, ExecError, Model, NodeGates};
use crate::tensor::Tensor;

use super::data::{Batch, TaskKind};

/// Fraction of positions where the prediction equals the label.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(pred.len(), labels.len());
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Intersection-over-union averaged over the classes present in `labels`.
pub fn mean_iou(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    assert_eq!(pred.len(), labels.len());
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        present[l] = true;
        if p == l {
            inter[l] += 1;
            union[l] += 1;
        } else {
            union[l] += 1;
            if p < classes {
                union[p] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..classes).filter(|&c| present[c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Sample accuracy, or pixel accuracy for dense tasks.
    pub accuracy: f64,
    /// Mean IoU for dense tasks; `None` for classification.
    pub miou: Option<f64>,
}

impl Evaluation {
    /// The headline metric: mIoU for dense tasks, accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.miou.unwrap_or(self.accuracy)
    }
}

/// Class predictions (argmax over axis 1) of `[b, c]` or `[b, c, h, w]`.
pub fn predictions(output: &Tensor) -> Vec<usize> {
    output.argmax(1)
}

/// Evaluates `model` on fixed batches, optionally under gates.
pub fn evaluate(
    model: &Model,
    gates: Option<&NodeGates>,
    batches: &[Batch],
    task: TaskKind,
    classes: usize,
) -> Result<Evaluation, ExecError> {
    let out_id = &model.graph.named_outputs()[0];
    let mut pred = Vec::new();
    let mut labels = Vec::new();
    for b in batches {
        let exec = match gates {
            Some(g) => execute_gated(model, &b.inputs, g, false)?,
            None => execute(model, &b.inputs, false)?,
        };
        pred.extend(predictions(&exec.outputs()[out_id]));
        labels.extend_from_slice(&b.labels);
    }
    Ok(match task {
        TaskKind::Classification => Evaluation { accuracy: accuracy(&pred, &labels), miou: None },
        TaskKind::Dense => Evaluation { accuracy: accuracy(&pred, &labels), miou: Some(mean_iou(&pred, &labels, classes)) },
    })
}
