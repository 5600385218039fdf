//! On-disk layout of a pruning run and recomputation of its report.
//!
//! ```text
//! config.json     prune config, dataset spec and dataset seed
//! source.txt      unpruned graph        source.bin    its weights
//! teacher.txt     teacher graph         teacher.bin   its weights
//! student.bin     final student weights before compaction
//! graph.txt       compacted graph       weights.bin   its weights
//! scheme.json     pruning scheme
//! events.csv      one row per pruned channel
//! importance.csv  per-step scores (only when recorded)
//! report.json     run summary
//! metrics.csv     the summary as metric,value rows
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combing::{validate_masks, CombError, MaskReport, PruningScheme};
use crate::graph::{compact, parse_graph, serialize_graph, CompactError, ExecError, GraphError, Model, ModelError, ParamStore};
use crate::importance::{write_importance_csv, MaskSet};
use crate::pruning::{
    compaction_error, event_granularity, read_events_csv, write_events_csv, PruneConfig, PruneError, PruneEvent, RunOutput,
    RunReport,
};

use super::metrics::evaluate;
use super::DatasetSpec;

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Comb(#[from] CombError),
    #[error("scheme does not match the unpruned graph")]
    SchemeMismatch,
    #[error("event references group {group} channel {channel}, absent from the scheme")]
    BadEvent { group: usize, channel: usize },
    #[error(transparent)]
    Masks(#[from] MaskReport),
    #[error(transparent)]
    Compact(#[from] CompactError),
    #[error("replaying the events log does not reproduce the compacted checkpoint")]
    ReplayMismatch,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, RunDirError> {
    r.map_err(|source| RunDirError::Io { path: path.display().to_string(), source })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prune: PruneConfig,
    pub dataset: DatasetSpec,
    pub dataset_seed: u64,
}

fn write_model(dir: &Path, stem: &str, m: &Model) -> Result<(), RunDirError> {
    let g = dir.join(format!("{stem}.txt"));
    io(&g, fs::write(&g, serialize_graph(&m.graph)))?;
    m.params.save(&dir.join(format!("{stem}.bin")))?;
    Ok(())
}

fn read_model(dir: &Path, graph: &str, weights: &str) -> Result<Model, RunDirError> {
    let p = dir.join(graph);
    let g = parse_graph(&io(&p, fs::read_to_string(&p))?)?;
    Ok(Model::new(g, ParamStore::load(&dir.join(weights))?)?)
}

/// `metric,value` rows of a report.
pub fn report_rows(r: &RunReport) -> Vec<(String, String)> {
    let mut rows: Vec<(String, String)> = vec![
        ("target_sparsity".into(), r.target_sparsity.to_string()),
        ("achieved_sparsity".into(), r.achieved_sparsity.to_string()),
        ("event_granularity".into(), r.event_granularity.to_string()),
        ("stop_params_before".into(), r.stop_params_before.to_string()),
        ("stop_params_after".into(), r.stop_params_after.to_string()),
        ("params_before".into(), r.params_before.to_string()),
        ("params_after".into(), r.params_after.to_string()),
        ("macs_before".into(), r.macs_before.to_string()),
        ("macs_after".into(), r.macs_after.to_string()),
        ("speedup".into(), r.speedup.to_string()),
        ("accuracy_before".into(), r.before.accuracy.to_string()),
        ("accuracy_after".into(), r.after.accuracy.to_string()),
    ];
    if let (Some(b), Some(a)) = (r.before.miou, r.after.miou) {
        rows.push(("miou_before".into(), b.to_string()));
        rows.push(("miou_after".into(), a.to_string()));
    }
    rows.extend([
        ("pruning_steps".into(), r.pruning_steps.to_string()),
        ("finetune_steps".into(), r.finetune_steps.to_string()),
        ("events".into(), r.events.to_string()),
        ("mask_checks".into(), r.mask_checks.to_string()),
        ("teacher_hash".into(), r.teacher_hash.clone()),
        ("compaction_error".into(), format!("{:e}", r.compaction_error)),
    ]);
    rows
}

pub fn write_metrics_csv(path: &Path, r: &RunReport) -> Result<(), RunDirError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in report_rows(r) {
        w.write_record([k, v])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_run_dir(dir: &Path, cfg: &RunConfig, baseline: &Model, teacher: &Model, out: &RunOutput) -> Result<(), RunDirError> {
    io(dir, fs::create_dir_all(dir))?;
    let json = |name: &str, text: String| -> Result<(), RunDirError> {
        let p = dir.join(name);
        io(&p, fs::write(&p, text))
    };
    json("config.json", serde_json::to_string_pretty(cfg)?)?;
    write_model(dir, "source", baseline)?;
    write_model(dir, "teacher", teacher)?;
    out.student.params.save(&dir.join("student.bin"))?;
    let g = dir.join("graph.txt");
    io(&g, fs::write(&g, serialize_graph(&out.model.graph)))?;
    out.model.params.save(&dir.join("weights.bin"))?;
    json("scheme.json", out.scheme.to_json())?;
    let p = dir.join("events.csv");
    write_events_csv(BufWriter::new(io(&p, File::create(&p))?), &out.events)?;
    if !out.importance.is_empty() {
        let p = dir.join("importance.csv");
        write_importance_csv(BufWriter::new(io(&p, File::create(&p))?), &out.importance)?;
    }
    json("report.json", serde_json::to_string_pretty(&out.report)?)?;
    write_metrics_csv(&dir.join("metrics.csv"), &out.report)?;
    Ok(())
}

/// Everything persisted by [`write_run_dir`] except the importance log.
pub struct LoadedRun {
    pub config: RunConfig,
    pub baseline: Model,
    pub teacher: Model,
    pub student: Model,
    pub compacted: Model,
    pub scheme: PruningScheme,
    pub events: Vec<PruneEvent>,
    pub report: RunReport,
}

pub fn load_run_dir(dir: &Path) -> Result<LoadedRun, RunDirError> {
    let read = |name: &str| -> Result<String, RunDirError> {
        let p = dir.join(name);
        io(&p, fs::read_to_string(&p))
    };
    let baseline = read_model(dir, "source.txt", "source.bin")?;
    let student = Model::new(baseline.graph.clone(), ParamStore::load(&dir.join("student.bin"))?)?;
    let p = dir.join("events.csv");
    Ok(LoadedRun {
        config: serde_json::from_str(&read("config.json")?)?,
        teacher: read_model(dir, "teacher.txt", "teacher.bin")?,
        student,
        compacted: read_model(dir, "graph.txt", "weights.bin")?,
        scheme: PruningScheme::from_json(&read("scheme.json")?)?,
        events: read_events_csv(io(&p, File::open(&p))?)?,
        report: serde_json::from_str(&read("report.json")?)?,
        baseline,
    })
}

/// Masks obtained by applying every logged event to all-ones masks.
pub fn replay_events(scheme: &PruningScheme, events: &[PruneEvent]) -> Result<MaskSet, RunDirError> {
    let mut masks = MaskSet::all_ones(scheme);
    for e in events {
        let g = scheme
            .groups
            .get(e.group)
            .filter(|g| e.channel < g.channels)
            .ok_or(RunDirError::BadEvent { group: e.group, channel: e.channel })?;
        masks.prune_channels(g, &[e.channel]);
    }
    validate_masks(scheme, &masks)?;
    Ok(masks)
}

/// Rebuilds the report from checkpoints and the events log alone: masks are
/// replayed, the student is recompacted and checked against the stored
/// compacted model, and both models are re-evaluated on the regenerated
/// dataset.
///
/// The pruning-phase length is inferred from the log: the last event's step
/// when the target was reached, otherwise the next event boundary (where the
/// run found nothing left to prune) capped by `max_pruning_steps`.
pub fn recompute_report(run: &LoadedRun) -> Result<RunReport, RunDirError> {
    if !run.scheme.matches(&run.baseline.graph) {
        return Err(RunDirError::SchemeMismatch);
    }
    let cfg = &run.config.prune;
    let masks = replay_events(&run.scheme, &run.events)?;
    let compacted = compact(&run.student, &run.scheme, &masks)?;
    if compacted.graph != run.compacted.graph || compacted.params != run.compacted.params {
        return Err(RunDirError::ReplayMismatch);
    }
    let data = run.config.dataset.build(run.config.dataset_seed);
    let before = evaluate(&run.baseline, None, data.eval_batches(), data.task, data.classes)?;
    let after = evaluate(&compacted, None, data.eval_batches(), data.task, data.classes)?;
    let err = compaction_error(&run.student, &run.scheme, &masks, &compacted, &data)?;
    let last = run.events.last();
    let pruning_steps = match last {
        _ if cfg.target_sparsity <= 0.0 => 0,
        Some(e) if e.sparsity >= cfg.target_sparsity => e.step,
        Some(e) => (e.step + cfg.interval_steps).min(cfg.max_pruning_steps),
        None => cfg.interval_steps.min(cfg.max_pruning_steps),
    };
    let finetune_steps = cfg.finetune_steps.unwrap_or(3 * pruning_steps);
    let (sb, sa) = (run.baseline.stop_param_count(), compacted.stop_param_count());
    let (mb, ma) = (run.baseline.graph.macs_per_sample(), compacted.graph.macs_per_sample());
    Ok(RunReport {
        target_sparsity: cfg.target_sparsity,
        achieved_sparsity: 1.0 - sa as f64 / sb as f64,
        event_granularity: event_granularity(&run.events),
        stop_params_before: sb,
        stop_params_after: sa,
        params_before: run.baseline.params.total_len(),
        params_after: compacted.params.total_len(),
        macs_before: mb,
        macs_after: ma,
        speedup: mb as f64 / ma as f64,
        before,
        after,
        pruning_steps,
        finetune_steps,
        events: run.events.len(),
        mask_checks: pruning_steps / cfg.interval_steps,
        teacher_hash: run.teacher.params.content_hash(),
        compaction_error: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::MixtureConfig;
    use crate::harness::pretrained;
    use crate::pruning::run;

    #[test]
    fn recomputed_report_matches_the_run() {
        let spec = DatasetSpec::Mixture(MixtureConfig { train_size: 128, eval_size: 128, ..Default::default() });
        let data = spec.build(3);
        let base = pretrained("plain-mlp", &data, 50, 0.05, 0).unwrap();
        let prune = PruneConfig { interval_steps: 4, channels_per_event: 8, target_sparsity: 0.3, ..Default::default() };
        let out = run(&prune, &base, None, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { prune, dataset: spec, dataset_seed: 3 };
        write_run_dir(dir.path(), &cfg, &base, &base, &out).unwrap();
        let loaded = load_run_dir(dir.path()).unwrap();
        let re = recompute_report(&loaded).unwrap();
        assert_eq!(re, out.report);
        assert_eq!(loaded.report, out.report);
    }
}
