//! Greedy interval pruning with distillation from the unpruned model.
//!
//! Every training step runs the gated student on the task loss plus the
//! configured distillation term and adds each producer's channel scores to
//! the ledger. Every `interval_steps` steps the least important surviving
//! units are gated off in all producers of their group. Once the target
//! sparsity is reached the student is fine-tuned and compacted.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combing::{build_coupling_groups, node_gates, validate_masks, CombError, MaskReport, PruningScheme};
use crate::distill::{distill_loss, KdConfig, KdError, KdMethod, MemoryQueue};
use crate::graph::{compact, execute, execute_gated, forward, CompactError, ExecError, Model, NodeGates};
use crate::harness::data::{Batch, Dataset, TaskKind};
use crate::harness::metrics::{evaluate, Evaluation};
use crate::importance::{importance_rows, producer_scores, ImportanceError, ImportanceLedger, ImportanceRow, MaskSet};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (task {task}, distillation {kd:?})")]
    NonFinite { step: usize, task: f64, kd: Option<f64> },
    #[error("teacher weights changed during the run")]
    TeacherModified,
    #[error("teacher output shape {teacher:?} differs from student output shape {student:?}")]
    TeacherShape { teacher: Vec<usize>, student: Vec<usize> },
    #[error(transparent)]
    Masks(#[from] MaskReport),
    #[error(transparent)]
    Comb(#[from] CombError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kd(#[from] KdError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Compact(#[from] CompactError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the fine-tuning phase.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub interval_steps: usize,
    /// Pruning units removed per event.
    pub channels_per_event: usize,
    /// Fraction of stop-op parameters to remove.
    pub target_sparsity: f64,
    pub kd_method: KdMethod,
    pub kd: KdConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Defaults to three times the pruning-phase step count.
    pub finetune_steps: Option<usize>,
    /// Upper bound on pruning-phase steps.
    pub max_pruning_steps: usize,
    pub record_importance: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            interval_steps: 64,
            channels_per_event: 1,
            target_sparsity: 0.5,
            kd_method: KdMethod::None,
            kd: KdConfig::default(),
            seed: 0,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Cosine,
            finetune_steps: None,
            max_pruning_steps: 1_000_000,
            record_importance: false,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let bad = |m: &str| Err(PruneError::Config(m.to_string()));
        if self.interval_steps == 0 {
            return bad("interval_steps must be positive");
        }
        if self.channels_per_event == 0 {
            return bad("channels_per_event must be positive");
        }
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return bad("target_sparsity must lie in [0, 1)");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("batch_size and lr must be positive and momentum in [0, 1)");
        }
        self.kd.validate()?;
        Ok(())
    }
}

/// SGD with heavy-ball momentum and optional L2 weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            let w = model.params.get_mut(name).expect("gradient for a known parameter");
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (wd, mu) = (self.weight_decay, self.momentum);
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut().iter_mut()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// `(parameter, row)` entries that belong to gated-off channels: producer
/// weight rows and biases, and rider scales and shifts.
pub fn masked_rows(scheme: &PruningScheme, masks: &MaskSet) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for g in &scheme.groups {
        let gates = masks.group_gates(g);
        for c in (0..g.channels).filter(|&c| !gates[c]) {
            for p in &g.producers {
                out.push((format!("{p}.weight"), c));
                out.push((format!("{p}.bias"), c));
            }
            for r in &g.riders {
                out.push((format!("{}.gamma", r.op), r.slice[0] + c));
                out.push((format!("{}.beta", r.op), r.slice[0] + c));
            }
        }
    }
    out
}

fn zero_rows(tensors: &mut BTreeMap<String, Tensor>, rows: &[(String, usize)]) {
    for (name, r) in rows {
        if let Some(t) = tensors.get_mut(name) {
            let inner = t.numel() / t.shape()[0];
            t.data_mut()[r * inner..(r + 1) * inner].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Stop-op parameters that survive `masks`; equals the stop-op parameter
/// count of the compacted model.
pub fn live_stop_params(model: &Model, scheme: &PruningScheme, masks: &MaskSet) -> usize {
    let graph = &model.graph;
    let mut out_alive: BTreeMap<&str, usize> = BTreeMap::new();
    let mut in_pruned: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &scheme.groups {
        let gates = masks.group_gates(g);
        let alive = gates.iter().filter(|&&x| x).count();
        for p in &g.producers {
            out_alive.insert(p, alive);
        }
        for c in &g.consumers {
            *in_pruned.entry(&c.op).or_default() += g.channels - alive;
        }
    }
    graph
        .stop_ops()
        .map(|n| {
            let out = out_alive.get(n.id.as_str()).copied().unwrap_or(n.out_channels());
            let inp = n.in_channels - in_pruned.get(n.id.as_str()).copied().unwrap_or(0);
            match n.kind {
                crate::graph::OpKind::Linear { bias, .. } => out * inp + if bias { out } else { 0 },
                crate::graph::OpKind::Conv { kernel, groups, bias, .. } => {
                    let per_group_in = if n.is_depthwise() { 1 } else { inp / groups };
                    out * per_group_in * kernel * kernel + if bias { out } else { 0 }
                }
                _ => 0,
            }
        })
        .sum()
}

/// One pruning decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub group: usize,
    pub channel: usize,
    /// Score of the unit the channel belongs to.
    pub score: f64,
    /// Sparsity after the event.
    pub sparsity: f64,
}

/// Mutable state of one pruning run.
pub struct PruneRunState {
    pub config: PruneConfig,
    pub student: Model,
    pub teacher: Model,
    pub teacher_hash: String,
    pub scheme: PruningScheme,
    pub masks: MaskSet,
    pub ledger: ImportanceLedger,
    pub optimizer: Sgd,
    pub queue: MemoryQueue,
    pub events: Vec<PruneEvent>,
    pub importance: Vec<ImportanceRow>,
    pub step: usize,
    pub current_sparsity: f64,
    pub baseline_stop_params: usize,
    pub mask_checks: usize,
    /// Set once no unit can be pruned without emptying a layer.
    pub exhausted: bool,
    pub rng: ChaCha8Rng,
}

/// Losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub task: f64,
    pub kd: Option<f64>,
}

impl PruneRunState {
    pub fn new(config: PruneConfig, student: Model, teacher: Model) -> Result<Self, PruneError> {
        config.validate()?;
        let scheme = build_coupling_groups(&student.graph)?;
        let masks = MaskSet::all_ones(&scheme);
        let ledger = ImportanceLedger::new(&student.graph, &scheme, config.batch_size);
        let baseline_stop_params = student.stop_param_count();
        Ok(Self {
            teacher_hash: teacher.params.content_hash(),
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            queue: MemoryQueue::new(config.kd.queue_size),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            student,
            teacher,
            scheme,
            masks,
            ledger,
            events: Vec::new(),
            importance: Vec::new(),
            step: 0,
            current_sparsity: 0.0,
            baseline_stop_params,
            mask_checks: 0,
            exhausted: false,
        })
    }

    pub fn gates(&self) -> NodeGates {
        node_gates(&self.student.graph, &self.scheme, &self.masks)
    }

    pub fn target_reached(&self) -> bool {
        self.current_sparsity >= self.config.target_sparsity
    }

    /// One forward/backward/update. Scores go to the ledger when `score`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64, score: bool) -> Result<StepLoss, PruneError> {
        let kd = self.config.kd_method;
        let gates = self.gates();
        let teacher = &self.teacher;
        let (teacher_out, student) = rayon::join(
            || -> Result<Option<Tensor>, ExecError> {
                if kd == KdMethod::None {
                    return Ok(None);
                }
                let out = execute(teacher, &batch.inputs, false)?.outputs();
                Ok(Some(out[&teacher.graph.named_outputs()[0]].clone()))
            },
            || -> Result<_, ExecError> {
                let mut tape = Tape::new();
                let fw = forward(&mut tape, &self.student, &batch.inputs, Some(&gates), true)?;
                Ok((tape, fw))
            },
        );
        let teacher_out = teacher_out?;
        let (mut tape, fw) = student?;
        let out = fw.var(&self.student.graph.named_outputs()[0]).unwrap();
        let task = tape.cross_entropy(out, &batch.labels, 1)?;
        let mut total = task;
        let mut kd_var = None;
        if let Some(t) = &teacher_out {
            if t.shape() != tape.value(out).shape() {
                return Err(PruneError::TeacherShape {
                    teacher: t.shape().to_vec(),
                    student: tape.value(out).shape().to_vec(),
                });
            }
            if let Some(k) =
                distill_loss(&mut tape, kd, out, t, &batch.labels, &mut self.queue, &self.config.kd, &mut self.rng)?
            {
                total = tape.add(task, k)?;
                kd_var = Some(k);
            }
        }
        let loss = StepLoss { task: tape.value(task).item(), kd: kd_var.map(|k| tape.value(k).item()) };
        if !tape.value(total).item().is_finite() {
            return Err(PruneError::NonFinite { step: self.step, task: loss.task, kd: loss.kd });
        }
        tape.backward(total)?;

        let mut grads: BTreeMap<String, Tensor> = fw
            .params
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.clone())))
            .collect();
        if score {
            let scores = producer_scores(&self.student.graph, &self.scheme, |n| self.student.params.get(n), |n| grads.get(n))?;
            self.ledger.accumulate(&scores)?;
            if self.config.record_importance {
                let rows = importance_rows(self.step, &scores, &self.ledger, &self.scheme, &self.masks)?;
                self.importance.extend(rows);
            }
        }
        zero_rows(&mut grads, &masked_rows(&self.scheme, &self.masks));
        self.optimizer.step(&mut self.student, &grads, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Gates off the least important surviving units and resets the ledger.
    ///
    /// Units whose removal would empty their group are skipped. Returns the
    /// number of units pruned.
    pub fn prune_event(&mut self) -> Result<usize, PruneError> {
        let ranked = self.ledger.ranked_units(&self.scheme, &self.masks)?;
        let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
        let mut chosen = Vec::new();
        for (score, gid, unit) in ranked {
            if chosen.len() == self.config.channels_per_event {
                break;
            }
            let group = &self.scheme.groups[gid];
            let alive = self.masks.alive_units(group).len() - taken.get(&gid).copied().unwrap_or(0);
            if alive <= 1 {
                warn!("skipping group {gid}: pruning unit {unit} would empty it");
                continue;
            }
            *taken.entry(gid).or_default() += 1;
            chosen.push((score, gid, unit));
        }
        for &(score, gid, unit) in &chosen {
            let group = self.scheme.groups[gid].clone();
            let channels = group.unit_channels(unit);
            self.masks.prune_channels(&group, &channels);
            self.current_sparsity =
                1.0 - live_stop_params(&self.student, &self.scheme, &self.masks) as f64 / self.baseline_stop_params as f64;
            for c in channels {
                self.events.push(PruneEvent { step: self.step, group: gid, channel: c, score, sparsity: self.current_sparsity });
            }
        }
        if chosen.is_empty() {
            warn!("no prunable unit left at step {}", self.step);
            self.exhausted = true;
        }
        validate_masks(&self.scheme, &self.masks)?;
        self.mask_checks += 1;
        let rows = masked_rows(&self.scheme, &self.masks);
        zero_rows(&mut self.optimizer.velocity, &rows);
        self.ledger.reset();
        Ok(chosen.len())
    }

    /// Training steps at constant learning rate with an event every
    /// `interval_steps` steps, until the target sparsity is reached.
    pub fn pruning_phase(&mut self, data: &Dataset) -> Result<(), PruneError> {
        while !self.target_reached() && !self.exhausted && self.step < self.config.max_pruning_steps {
            let batch = data.train_batch(&mut self.rng, self.config.batch_size);
            self.train_step(&batch, self.config.lr, true)?;
            if self.step % self.config.interval_steps == 0 {
                self.prune_event()?;
                info!("step {}: sparsity {:.3}", self.step, self.current_sparsity);
            }
        }
        Ok(())
    }

    pub fn finetune_phase(&mut self, data: &Dataset, steps: usize) -> Result<(), PruneError> {
        for i in 0..steps {
            let lr = match self.config.lr_schedule {
                LrSchedule::Constant => self.config.lr,
                LrSchedule::Cosine => 0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * i as f64 / steps as f64).cos()),
            };
            let batch = data.train_batch(&mut self.rng, self.config.batch_size);
            self.train_step(&batch, lr, false)?;
        }
        Ok(())
    }
}

/// Summary of one run; every number is recomputable from the run's
/// checkpoints and events log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    /// Largest sparsity change caused by a single event.
    pub event_granularity: f64,
    pub stop_params_before: usize,
    pub stop_params_after: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub macs_before: u64,
    pub macs_after: u64,
    pub speedup: f64,
    pub before: Evaluation,
    pub after: Evaluation,
    pub pruning_steps: usize,
    pub finetune_steps: usize,
    pub events: usize,
    pub mask_checks: usize,
    pub teacher_hash: String,
    /// Largest gated-vs-compacted output difference on the evaluation set.
    pub compaction_error: f64,
}

pub struct RunOutput {
    /// Compacted student.
    pub model: Model,
    /// Student before compaction, with pruned rows still present.
    pub student: Model,
    pub scheme: PruningScheme,
    pub masks: MaskSet,
    pub events: Vec<PruneEvent>,
    pub importance: Vec<ImportanceRow>,
    pub report: RunReport,
}

/// Prunes `model` to the configured sparsity on `data`, distilling from
/// `teacher` (a frozen copy of `model` when `None`), then fine-tunes and
/// compacts.
pub fn run(config: &PruneConfig, model: &Model, teacher: Option<&Model>, data: &Dataset) -> Result<RunOutput, PruneError> {
    if data.task == TaskKind::Classification && matches!(config.kd_method, KdMethod::Cwd | KdMethod::Cirkd) {
        return Err(PruneError::Config(format!("{} distillation needs a dense-prediction task", config.kd_method)));
    }
    let teacher = teacher.cloned().unwrap_or_else(|| model.clone());
    let before = evaluate(model, None, data.eval_batches(), data.task, data.classes)?;
    let mut state = PruneRunState::new(config.clone(), model.clone(), teacher)?;
    state.pruning_phase(data)?;
    let pruning_steps = state.step;
    let finetune = config.finetune_steps.unwrap_or(3 * pruning_steps);
    state.finetune_phase(data, finetune)?;
    if state.teacher.params.content_hash() != state.teacher_hash {
        return Err(PruneError::TeacherModified);
    }

    let compacted = compact(&state.student, &state.scheme, &state.masks)?;
    let compaction_error = compaction_error(&state.student, &state.scheme, &state.masks, &compacted, data)?;
    let after = evaluate(&compacted, None, data.eval_batches(), data.task, data.classes)?;
    let granularity = event_granularity(&state.events);
    let macs_before = model.graph.macs_per_sample();
    let macs_after = compacted.graph.macs_per_sample();
    let report = RunReport {
        target_sparsity: config.target_sparsity,
        achieved_sparsity: 1.0 - compacted.stop_param_count() as f64 / model.stop_param_count() as f64,
        event_granularity: granularity,
        stop_params_before: model.stop_param_count(),
        stop_params_after: compacted.stop_param_count(),
        params_before: model.params.total_len(),
        params_after: compacted.params.total_len(),
        macs_before,
        macs_after,
        speedup: macs_before as f64 / macs_after as f64,
        before,
        after,
        pruning_steps,
        finetune_steps: finetune,
        events: state.events.len(),
        mask_checks: state.mask_checks,
        teacher_hash: state.teacher_hash.clone(),
        compaction_error,
    };
    Ok(RunOutput {
        model: compacted,
        student: state.student,
        scheme: state.scheme,
        masks: state.masks,
        events: state.events,
        importance: state.importance,
        report,
    })
}

/// Largest output difference between the gated and the compacted model over
/// the evaluation set.
pub fn compaction_error(
    student: &Model,
    scheme: &PruningScheme,
    masks: &MaskSet,
    compacted: &Model,
    data: &Dataset,
) -> Result<f64, PruneError> {
    let gates = node_gates(&student.graph, scheme, masks);
    let out_id = &student.graph.named_outputs()[0];
    let mut err: f64 = 0.0;
    for b in data.eval_batches() {
        let g = execute_gated(student, &b.inputs, &gates, false)?.outputs();
        let c = execute(compacted, &b.inputs, false)?.outputs();
        err = err.max(g[out_id].max_abs_diff(&c[out_id])?);
    }
    Ok(err)
}

/// Largest sparsity increase caused by one event; log rows that share a
/// step belong to the same event.
pub fn event_granularity(events: &[PruneEvent]) -> f64 {
    let mut granularity: f64 = 0.0;
    let mut before = 0.0;
    for (i, e) in events.iter().enumerate() {
        if events.get(i + 1).is_none_or(|n| n.step != e.step) {
            granularity = granularity.max(e.sparsity - before);
            before = e.sparsity;
        }
    }
    granularity
}

/// Plain supervised training, used to produce baselines and teachers.
pub fn train(model: &mut Model, data: &Dataset, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Result<(), PruneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(0.9, 0.0);
    for i in 0..steps {
        let batch = data.train_batch(&mut rng, batch_size);
        let mut tape = Tape::new();
        let fw = forward(&mut tape, model, &batch.inputs, None, true)?;
        let out = fw.var(&model.graph.named_outputs()[0]).unwrap();
        let loss = tape.cross_entropy(out, &batch.labels, 1)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(PruneError::NonFinite { step: i, task: v, kd: None });
        }
        tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> =
            fw.params.iter().filter_map(|(n, &p)| tape.grad(p).map(|g| (n.clone(), g.clone()))).collect();
        let step_lr = 0.5 * lr * (1.0 + (std::f64::consts::PI * i as f64 / steps as f64).cos());
        opt.step(model, &grads, step_lr);
    }
    Ok(())
}

pub fn write_events_csv<W: std::io::Write>(w: W, events: &[PruneEvent]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in events {
        wr.serialize(e)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<PruneEvent>> {
    csv::Reader::from_reader(r).deserialize().collect()
}
