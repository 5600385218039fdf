use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cpd_core::combing::{build_coupling_groups, PruningScheme};
use cpd_core::distill::{CwdAxis, KdConfig, KdMethod};
use cpd_core::graph::{parse_graph, ComputationGraph, Model, ParamStore};
use cpd_core::harness::rundir::{load_run_dir, recompute_report, report_rows, write_metrics_csv, write_run_dir, RunConfig};
use cpd_core::harness::zoo::{zoo_source, ZOO};
use cpd_core::harness::{init_global_threads, kd_ablation, sparsity_sweep, trained, DatasetSpec, ExperimentSpec};
use cpd_core::pruning::{run, LrSchedule, PruneConfig};

/// Channel pruning with coupling-aware grouping and knowledge distillation.
#[derive(Parser)]
#[command(name = "cpd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in models, or print one model's graph description.
    Zoo {
        name: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Build the pruning scheme (coupling groups) of a graph.
    Comb {
        /// Graph description file, or `zoo:<name>`.
        graph: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Prune a model to a target sparsity and write a run directory.
    Prune(PruneArgs),
    /// Recompute a run's metrics from its checkpoints and events log.
    Report {
        run_dir: PathBuf,
        /// Print the events log after the metrics.
        #[arg(long)]
        events: bool,
    },
    /// Distillation ablation: one pruning run per method, teacher and seed.
    DistillEval {
        /// Experiment spec (JSON).
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sparsity sweep plus distillation ablation from one experiment spec.
    Sweep {
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Spatial,
    Channel,
}

#[derive(Args)]
struct PruneArgs {
    /// Graph description file, or `zoo:<name>`.
    graph: String,
    /// Scheme written by `cpd comb` for the same graph.
    scheme: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Pretrained weights; without them the model is initialized from the
    /// seed and trained for `--pretrain-steps`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pretrain_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pretrain_lr: f64,
    /// Teacher graph (file or `zoo:<name>`); defaults to the unpruned model.
    #[arg(long)]
    teacher_graph: Option<String>,
    #[arg(long, requires = "teacher_graph")]
    teacher_weights: Option<PathBuf>,
    /// Dataset spec (JSON); derived from the graph when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    dataset_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value = "none")]
    kd: KdMethod,
    #[arg(long, default_value_t = 64)]
    interval: usize,
    #[arg(long, default_value_t = 1)]
    channels_per_event: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = Schedule::Cosine)]
    lr_schedule: Schedule,
    /// Defaults to three times the pruning-phase length.
    #[arg(long)]
    finetune_steps: Option<usize>,
    /// Write per-step channel scores to importance.csv.
    #[arg(long)]
    record_importance: bool,
    #[arg(long, default_value_t = 4.0)]
    kd_temp: f64,
    #[arg(long, default_value_t = 1.0)]
    kd_alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    kd_beta: f64,
    #[arg(long, default_value_t = 0.1)]
    kd_gamma: f64,
    #[arg(long, default_value_t = 64)]
    kd_queue: usize,
    #[arg(long, default_value_t = 32)]
    kd_samples: usize,
    #[arg(long, value_enum, default_value_t = Axis::Spatial)]
    cwd_axis: Axis,
}

fn load_graph(spec: &str) -> Result<ComputationGraph> {
    let text = match spec.strip_prefix("zoo:") {
        Some(name) => zoo_source(name)?,
        None => fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?,
    };
    parse_graph(&text).with_context(|| format!("parsing {spec}"))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn model_for(
    graph: ComputationGraph,
    weights: Option<&Path>,
    data: &cpd_core::harness::data::Dataset,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Model> {
    match weights {
        Some(w) => Ok(Model::new(graph, ParamStore::load(w)?)?),
        None => {
            info!("pretraining for {steps} steps");
            Ok(trained(graph, data, steps, lr, seed)?)
        }
    }
}

fn prune(a: &PruneArgs) -> Result<()> {
    let graph = load_graph(&a.graph)?;
    let text = fs::read_to_string(&a.scheme).with_context(|| format!("reading {}", a.scheme.display()))?;
    let scheme = PruningScheme::from_json(&text)?;
    if !scheme.matches(&graph) || scheme != build_coupling_groups(&graph)? {
        bail!("{} was not produced by `cpd comb` for this graph", a.scheme.display());
    }
    let dataset = match &a.dataset {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => DatasetSpec::for_graph(&graph)?,
    };
    let data = dataset.build(a.dataset_seed);
    let config = PruneConfig {
        interval_steps: a.interval,
        channels_per_event: a.channels_per_event,
        target_sparsity: a.sparsity,
        kd_method: a.kd,
        kd: KdConfig {
            temperature: a.kd_temp,
            alpha: a.kd_alpha,
            beta: a.kd_beta,
            gamma: a.kd_gamma,
            queue_size: a.kd_queue,
            samples_per_step: a.kd_samples,
            cwd_axis: match a.cwd_axis {
                Axis::Spatial => CwdAxis::Spatial,
                Axis::Channel => CwdAxis::Channel,
            },
            ..KdConfig::default()
        },
        seed: a.seed,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        lr_schedule: match a.lr_schedule {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::Cosine => LrSchedule::Cosine,
        },
        finetune_steps: a.finetune_steps,
        record_importance: a.record_importance,
        ..PruneConfig::default()
    };
    config.validate()?;
    let baseline = model_for(graph, a.weights.as_deref(), &data, a.pretrain_steps, a.pretrain_lr, a.seed)?;
    let teacher = match &a.teacher_graph {
        Some(g) => model_for(load_graph(g)?, a.teacher_weights.as_deref(), &data, a.pretrain_steps, a.pretrain_lr, a.seed)?,
        None => baseline.clone(),
    };
    let out = run(&config, &baseline, Some(&teacher), &data)?;
    let run_cfg = RunConfig { prune: config, dataset, dataset_seed: a.dataset_seed };
    write_run_dir(&a.output, &run_cfg, &baseline, &teacher, &out)?;
    let r = &out.report;
    println!(
        "sparsity {:.4} (target {}), speedup {:.3}x, score {:.4} -> {:.4}, {} events; run written to {}",
        r.achieved_sparsity,
        r.target_sparsity,
        r.speedup,
        r.before.score(),
        r.after.score(),
        r.events,
        a.output.display()
    );
    Ok(())
}

/// Returns whether the recomputed report matches the stored one.
fn report(dir: &Path, events: bool) -> Result<bool> {
    let run = load_run_dir(dir)?;
    let fresh = recompute_report(&run)?;
    write_metrics_csv(&dir.join("metrics.csv"), &fresh)?;
    println!("metric,value");
    for (k, v) in report_rows(&fresh) {
        println!("{k},{v}");
    }
    if events {
        println!();
        println!("step,group,channel,score,sparsity");
        for e in &run.events {
            println!("{},{},{},{},{}", e.step, e.group, e.channel, e.score, e.sparsity);
        }
    }
    let stored = report_rows(&run.report);
    let mismatched: Vec<_> = report_rows(&fresh).into_iter().zip(stored).filter(|(a, b)| a != b).collect();
    for ((k, fresh), (_, old)) in &mismatched {
        eprintln!("warning: {k} recomputes to {fresh}, report.json has {old}");
    }
    Ok(mismatched.is_empty())
}

fn read_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: ExperimentSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn print_ablation(t: &cpd_core::harness::AblationTable) {
    println!("method,teacher,mean,std");
    for r in &t.rows {
        println!("{},{},{:.4},{:.4}", r.method, r.teacher, r.mean, r.std);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_global_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Zoo { name: None, .. } => {
            ZOO.iter().for_each(|n| println!("{n}"));
            Ok(true)
        }
        Command::Zoo { name: Some(n), output } => {
            zoo_source(&n).map_err(Into::into).and_then(|src| write_or_print(output.as_deref(), &src)).map(|_| true)
        }
        Command::Comb { graph, output } => load_graph(&graph)
            .and_then(|g| Ok(build_coupling_groups(&g)?))
            .and_then(|s| {
                let groups = s.groups.len();
                let prunable = s.prunable_groups().count();
                write_or_print(output.as_deref(), &s.to_json())?;
                if output.is_some() {
                    println!("{groups} coupling groups, {prunable} prunable");
                }
                Ok(true)
            }),
        Command::Prune(a) => prune(&a).map(|_| true),
        Command::Report { run_dir, events } => report(&run_dir, events),
        Command::DistillEval { spec, output } => read_spec(&spec).and_then(|s| {
            let t = kd_ablation(&s, Some(&output))?;
            print_ablation(&t);
            Ok(true)
        }),
        Command::Sweep { spec, output } => read_spec(&spec).and_then(|s| {
            let r = sparsity_sweep(&s, Some(&output))?;
            println!("sparsity,mean,std,runs");
            for p in &r.curve {
                println!("{},{:.4},{:.4},{}", p.sparsity, p.mean, p.std, p.runs);
            }
            match r.knee {
                Some(k) => println!("knee at sparsity {k}"),
                None => println!("no knee on this grid"),
            }
            if !s.kd_methods.is_empty() {
                print_ablation(&kd_ablation(&s, Some(&output))?);
            }
            Ok(r.cells.iter().all(|c| c.error.is_none()))
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
