//! Desk-scale experiments: zoo models, synthetic data, sparsity sweeps and
//! distillation ablations.

pub mod data;
pub mod metrics;
pub mod plot;
pub mod rundir;
pub mod zoo;

use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::KdMethod;
use crate::graph::{init_params, ComputationGraph, Layout, Model};
use crate::pruning::{run, train, PruneConfig, PruneError, RunOutput};

use data::{Dataset, MixtureConfig, ShapesConfig, TaskKind};
use zoo::{zoo_build, zoo_task, UnknownModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] UnknownModel),
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    RunDir(#[from] rundir::RunDirError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Mixture(MixtureConfig),
    Shapes(ShapesConfig),
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Dataset {
        match self {
            DatasetSpec::Mixture(c) => Dataset::gaussian_mixture(c, seed),
            DatasetSpec::Shapes(c) => Dataset::shapes(c, seed),
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            DatasetSpec::Mixture(_) => TaskKind::Classification,
            DatasetSpec::Shapes(_) => TaskKind::Dense,
        }
    }

    /// A dataset matching the graph's single input and output: segmentation
    /// shapes for image-to-image graphs with 3 input channels and square
    /// images, Gaussian mixtures otherwise.
    pub fn for_graph(graph: &ComputationGraph) -> Result<Self, HarnessError> {
        let (ins, outs) = (graph.named_inputs(), graph.named_outputs());
        if ins.len() != 1 || outs.len() != 1 || ins[0] != "x" {
            return Err(HarnessError::Spec("graphs need exactly one input `x` and one output".into()));
        }
        let i = graph.node(&ins[0]).expect("declared input").shape;
        let o = graph.node(&outs[0]).expect("declared output").shape;
        match (i.layout, o.layout) {
            (Layout::Image, Layout::Image) if i.channels == 3 && i.height == i.width && o.height == i.height && o.width == i.width => {
                Ok(DatasetSpec::Shapes(ShapesConfig { classes: o.channels, size: i.height, ..Default::default() }))
            }
            (Layout::Image, Layout::Flat) => Ok(DatasetSpec::Mixture(MixtureConfig {
                classes: o.channels,
                shape: vec![i.channels, i.height, i.width],
                ..Default::default()
            })),
            (Layout::Flat, Layout::Flat) => {
                Ok(DatasetSpec::Mixture(MixtureConfig { classes: o.channels, shape: vec![i.channels], ..Default::default() }))
            }
            _ => Err(HarnessError::Spec(format!(
                "no synthetic dataset for {} input and {} output",
                i.layout.name(),
                o.layout.name()
            ))),
        }
    }

    /// A dataset whose samples fit the named zoo model.
    pub fn for_model(name: &str) -> Result<Self, UnknownModel> {
        Ok(match name {
            "plain-mlp" => DatasetSpec::Mixture(MixtureConfig::default()),
            "residual" | "grouped" | "depthwise" => DatasetSpec::Mixture(MixtureConfig { shape: vec![3, 8, 8], ..Default::default() }),
            "attention" | "attention-large" => DatasetSpec::Shapes(ShapesConfig::default()),
            _ => return Err(UnknownModel(name.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub model: String,
    /// Larger teacher for the teacher-selection arm of the ablation.
    pub teacher_model: Option<String>,
    pub dataset: DatasetSpec,
    pub dataset_seed: u64,
    pub sparsities: Vec<f64>,
    pub kd_methods: Vec<KdMethod>,
    /// Sparsity of every ablation arm.
    pub ablation_sparsity: f64,
    pub repetitions: usize,
    /// Repetition `i` uses seed `first_seed + i`.
    pub first_seed: u64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub prune: PruneConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            model: "plain-mlp".into(),
            teacher_model: None,
            dataset: DatasetSpec::Mixture(MixtureConfig::default()),
            dataset_seed: 0,
            sparsities: vec![0.0, 0.2, 0.4, 0.6],
            kd_methods: vec![KdMethod::None, KdMethod::Kl],
            ablation_sparsity: 0.5,
            repetitions: 3,
            first_seed: 0,
            pretrain_steps: 600,
            pretrain_lr: 0.05,
            prune: PruneConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        zoo_task(&self.model)?;
        if let Some(t) = &self.teacher_model {
            zoo_task(t)?;
        }
        if zoo_task(&self.model)? != self.dataset.task() {
            return Err(HarnessError::Spec(format!("model {} does not fit the dataset task", self.model)));
        }
        if self.sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(HarnessError::Spec("sparsities must lie in [0, 1)".into()));
        }
        if self.sparsities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Spec("sparsities must be strictly ascending".into()));
        }
        if self.repetitions == 0 {
            return Err(HarnessError::Spec("repetitions must be positive".into()));
        }
        self.prune.validate()?;
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|i| self.first_seed + i).collect()
    }
}

fn env_threads() -> Option<usize> {
    std::env::var("CPD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Worker pool capped by `CPD_THREADS`.
pub fn thread_pool() -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = env_threads() {
        b = b.num_threads(n);
    }
    b.build().expect("thread pool")
}

/// Caps the global pool (used inside single runs) by `CPD_THREADS`. Has no
/// effect once the global pool exists.
pub fn init_global_threads() {
    if let Some(n) = env_threads() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// `graph` initialized from `seed` and trained on `data` with batch 32.
pub fn trained(graph: ComputationGraph, data: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<Model, HarnessError> {
    let p = init_params(&graph, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut m = Model::new(graph, p).expect("initialized parameters match the graph");
    train(&mut m, data, steps, 32.min(data.train_len()), lr, seed)?;
    Ok(m)
}

/// A zoo model initialized from `seed` and trained on `data`.
pub fn pretrained(name: &str, data: &Dataset, steps: usize, lr: f64, seed: u64) -> Result<Model, HarnessError> {
    trained(zoo_build(name)?, data, steps, lr, seed)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64 } else { 0.0 };
    (m, v.sqrt())
}

/// Interior grid point with the most negative divided second difference,
/// i.e. where the curve bends down hardest.
pub fn find_knee(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, f64)> = None;
    for i in 1..xs.len() - 1 {
        let left = (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
        let right = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        let d2 = 2.0 * (right - left) / (xs[i + 1] - xs[i - 1]);
        if d2.is_finite() && best.is_none_or(|(b, _)| d2 < b) {
            best = Some((d2, xs[i]));
        }
    }
    best.filter(|(d2, _)| *d2 < 0.0).map(|(_, x)| x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub sparsity: f64,
    pub seed: u64,
    pub score: Option<f64>,
    pub achieved_sparsity: Option<f64>,
    pub speedup: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sparsity: f64,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model: String,
    pub cells: Vec<SweepCell>,
    pub curve: Vec<CurvePoint>,
    pub knee: Option<f64>,
}

impl SweepReport {
    /// Mean score of every seed at `sparsity`, in seed order.
    pub fn scores_at(&self, sparsity: f64) -> Vec<Option<f64>> {
        self.cells.iter().filter(|c| c.sparsity == sparsity).map(|c| c.score).collect()
    }
}

fn baselines(spec: &ExperimentSpec, data: &Dataset, pool: &rayon::ThreadPool) -> Result<Vec<Model>, HarnessError> {
    pool.install(|| {
        spec.seeds()
            .par_iter()
            .map(|&seed| pretrained(&spec.model, data, spec.pretrain_steps, spec.pretrain_lr, seed))
            .collect()
    })
}

fn persist_cell(
    out: Option<&Path>,
    name: &str,
    spec: &ExperimentSpec,
    cfg: &PruneConfig,
    baseline: &Model,
    teacher: &Model,
    result: &RunOutput,
) -> Result<(), HarnessError> {
    if let Some(dir) = out {
        let run_cfg = rundir::RunConfig { prune: cfg.clone(), dataset: spec.dataset.clone(), dataset_seed: spec.dataset_seed };
        rundir::write_run_dir(&dir.join("runs").join(name), &run_cfg, baseline, teacher, result)?;
    }
    Ok(())
}

/// Score against sparsity for every seed; failed cells are recorded and the
/// sweep continues.
pub fn sparsity_sweep(spec: &ExperimentSpec, out: Option<&Path>) -> Result<SweepReport, HarnessError> {
    spec.validate()?;
    let pool = thread_pool();
    let data = spec.dataset.build(spec.dataset_seed);
    let bases = baselines(spec, &data, &pool)?;
    let jobs: Vec<(usize, f64)> =
        (0..bases.len()).flat_map(|i| spec.sparsities.iter().map(move |&s| (i, s))).collect();
    let seeds = spec.seeds();
    let cells: Vec<SweepCell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| {
                let cfg = PruneConfig { target_sparsity: s, seed: seeds[i], ..spec.prune.clone() };
                let res = run(&cfg, &bases[i], None, &data).map_err(HarnessError::from).and_then(|r| {
                    persist_cell(out, &format!("s{s:.2}-seed{}", seeds[i]), spec, &cfg, &bases[i], &bases[i], &r)?;
                    Ok(r)
                });
                match res {
                    Ok(r) => SweepCell {
                        sparsity: s,
                        seed: seeds[i],
                        score: Some(r.report.after.score()),
                        achieved_sparsity: Some(r.report.achieved_sparsity),
                        speedup: Some(r.report.speedup),
                        error: None,
                    },
                    Err(e) => {
                        warn!("sweep cell sparsity={s} seed={} failed: {e}", seeds[i]);
                        SweepCell { sparsity: s, seed: seeds[i], score: None, achieved_sparsity: None, speedup: None, error: Some(e.to_string()) }
                    }
                }
            })
            .collect()
    });
    let curve: Vec<CurvePoint> = spec
        .sparsities
        .iter()
        .map(|&s| {
            let xs: Vec<f64> = cells.iter().filter(|c| c.sparsity == s).filter_map(|c| c.score).collect();
            let (mean, std) = mean_std(&xs);
            CurvePoint { sparsity: s, mean, std, runs: xs.len() }
        })
        .collect();
    let valid: Vec<&CurvePoint> = curve.iter().filter(|p| p.runs > 0).collect();
    let knee = find_knee(
        &valid.iter().map(|p| p.sparsity).collect::<Vec<_>>(),
        &valid.iter().map(|p| p.mean).collect::<Vec<_>>(),
    );
    let report = SweepReport { model: spec.model.clone(), cells, curve, knee };
    if let Some(dir) = out {
        write_sweep(dir, &report)?;
    }
    Ok(report)
}

fn write_sweep(dir: &Path, r: &SweepReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("curve.csv"))?;
    for p in &r.curve {
        w.serialize(p)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("cells.csv"))?;
    for c in &r.cells {
        w.serialize(c)?;
    }
    w.flush()?;
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(r)?)?;
    let pts: Vec<(f64, f64)> = r.curve.iter().filter(|p| p.runs > 0).map(|p| (p.sparsity, p.mean)).collect();
    plot::line_plot(&dir.join("curve.png"), &[plot::Series { points: &pts, color: [31, 119, 180] }], r.knee)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: KdMethod,
    /// Zoo name of the teacher.
    pub teacher: String,
    pub mean: f64,
    pub std: f64,
    /// Per-seed scores in seed order; `None` marks a failed run.
    pub scores: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sparsity: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, method: KdMethod, teacher: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.teacher == teacher)
    }
}

/// Accuracy at a fixed sparsity per distillation method, with the model's
/// own unpruned weights as teacher; with `teacher_model` set, an extra arm
/// distills from that larger model using the first non-`None` method.
pub fn kd_ablation(spec: &ExperimentSpec, out: Option<&Path>) -> Result<AblationTable, HarnessError> {
    spec.validate()?;
    let pool = thread_pool();
    let data = spec.dataset.build(spec.dataset_seed);
    let bases = baselines(spec, &data, &pool)?;
    let seeds = spec.seeds();
    let big: Option<Vec<Model>> = match &spec.teacher_model {
        Some(t) => Some(pool.install(|| {
            seeds
                .par_iter()
                .map(|&s| pretrained(t, &data, spec.pretrain_steps, spec.pretrain_lr, s))
                .collect::<Result<Vec<_>, _>>()
        })?),
        None => None,
    };
    let mut arms: Vec<(KdMethod, String)> = spec.kd_methods.iter().map(|&m| (m, spec.model.clone())).collect();
    if let Some(t) = &spec.teacher_model {
        let m = spec.kd_methods.iter().copied().find(|&m| m != KdMethod::None).unwrap_or(KdMethod::Cwd);
        arms.push((m, t.clone()));
    }
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..seeds.len()).map(move |i| (a, i))).collect();
    let scores: Vec<Option<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, i)| {
                let (method, teacher_name) = &arms[a];
                let teacher = if *teacher_name == spec.model { &bases[i] } else { &big.as_ref().unwrap()[i] };
                let cfg = PruneConfig {
                    target_sparsity: spec.ablation_sparsity,
                    seed: seeds[i],
                    kd_method: *method,
                    ..spec.prune.clone()
                };
                let res = run(&cfg, &bases[i], Some(teacher), &data).map_err(HarnessError::from).and_then(|r| {
                    let name = format!("{method}-{teacher_name}-seed{}", seeds[i]);
                    persist_cell(out, &name, spec, &cfg, &bases[i], teacher, &r)?;
                    Ok(r)
                });
                match res {
                    Ok(r) => Some(r.report.after.score()),
                    Err(e) => {
                        warn!("ablation arm {method}/{teacher_name} seed {} failed: {e}", seeds[i]);
                        None
                    }
                }
            })
            .collect()
    });
    let rows = arms
        .iter()
        .enumerate()
        .map(|(a, (method, teacher))| {
            let s: Vec<Option<f64>> = (0..seeds.len()).map(|i| scores[a * seeds.len() + i]).collect();
            let ok: Vec<f64> = s.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&ok);
            AblationRow { method: *method, teacher: teacher.clone(), mean, std, scores: s }
        })
        .collect();
    let table = AblationTable { sparsity: spec.ablation_sparsity, seeds, rows };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("table.csv"))?;
        w.write_record(["method", "teacher", "mean", "std", "runs"])?;
        for r in &table.rows {
            let runs = r.scores.iter().flatten().count();
            w.write_record([r.method.name(), &r.teacher, &r.mean.to_string(), &r.std.to_string(), &runs.to_string()])?;
        }
        w.flush()?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knee_of_planted_collapse() {
        let xs = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let ys = [0.9, 0.89, 0.88, 0.87, 0.86, 0.5, 0.2];
        assert_eq!(find_knee(&xs, &ys), Some(0.4));
        assert_eq!(find_knee(&xs[..2], &ys[..2]), None);
        // a straight line has no knee
        assert_eq!(find_knee(&[0.0, 0.5, 1.0], &[1.0, 0.5, 0.0]), None);
    }

    #[test]
    fn spec_validation() {
        assert!(ExperimentSpec::default().validate().is_ok());
        let bad = ExperimentSpec { sparsities: vec![0.4, 0.2], ..Default::default() };
        assert!(bad.validate().is_err());
        let wrong_task = ExperimentSpec { model: "attention".into(), ..Default::default() };
        assert!(wrong_task.validate().is_err());
        for name in zoo::ZOO {
            let g = zoo_build(name).unwrap();
            assert_eq!(DatasetSpec::for_graph(&g).unwrap(), DatasetSpec::for_model(name).unwrap(), "{name}");
        }
        let json = serde_json::to_string(&ExperimentSpec::default()).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&json).unwrap(), ExperimentSpec::default());
    }
}
