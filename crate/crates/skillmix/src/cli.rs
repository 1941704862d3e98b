//! Command-line surface. Exit codes: 0 success, 1 runtime failure, 2 usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use skillmix_core::corpus::{DownstreamTask, Skill};
use skillmix_core::grad_check::{block_suite, BlockCheck};
use skillmix_core::train::FreezeMask;

use crate::analysis::{emit_report, extract_routing, RoutingProfile};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::experiment::{
    adapt, evaluate_task, pretrain, prepare_model, routing_accuracy, Dataset, EpochLog, RoutingAccuracy, TaskMetrics,
    TrainOutcome,
};
use crate::io::atomic_write;

pub const GRAD_CHECK_TOL: f64 = 1e-4;
pub const GRAD_CHECK_H: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(name = "skillmix", version, about = "Skill-routed cascaded reasoning: data, training, evaluation and routing analysis")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world, pretraining corpora and downstream tasks.
    GenData(Common),
    /// Multi-task pretraining with routing supervision.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a (pretrained) model to a downstream task.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint; omitted means training from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Evaluate a checkpoint on a downstream task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Average routing weights per step for skill and task sets.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated skill names (held-out pretraining sets) and task names (test sets).
        #[arg(long, default_value = "fact,nli,hop2_qa")]
        sets: String,
    },
    /// Finite-difference gradient checks of every block.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional directory for a JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated: single_depth, no_adapter, no_modularity.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Reasoning modules activated per step.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub full_activation: bool,
    /// Comma-separated parameter groups to freeze.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Routing-loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    /// hop2_qa, logic_fact or typed_hop2.
    #[arg(long)]
    pub task: Option<String>,
    /// Train on the few-shot split.
    #[arg(long)]
    pub few_shot: bool,
}

/// Loads the config file (if any) and applies flag overrides.
pub fn resolve_config(common: &Common, task: Option<&TaskArgs>, pretraining: bool) -> AppResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(list) = &common.ablate {
        for a in list.split(',').map(str::trim).filter(|a| !a.is_empty()) {
            match a {
                "single_depth" | "single" => cfg.ablations.single_depth = true,
                "no_adapter" => cfg.ablations.no_adapter = true,
                "no_modularity" => cfg.ablations.no_modularity = true,
                other => return Err(AppError::Usage(format!("unknown ablation `{other}`"))),
            }
        }
    }
    if let Some(k) = common.k {
        cfg.ablations.sparse_k = Some(k);
    }
    if common.full_activation {
        cfg.ablations.full_activation = true;
    }
    if let Some(f) = &common.freeze {
        cfg.adapt.freeze = FreezeMask::parse(f)?;
    }
    if let Some(l) = common.lambda {
        cfg.pretrain.lambda = l;
    }
    if let Some(e) = common.epochs {
        if pretraining {
            cfg.pretrain.epochs = e;
        } else {
            cfg.adapt.epochs = e;
        }
    }
    if let Some(t) = task {
        if let Some(name) = &t.task {
            cfg.adapt.task = name.clone();
        }
        if t.few_shot {
            cfg.adapt.few_shot = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Deterministic run report; wall time goes to a separate `timing.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub metrics: BTreeMap<String, f64>,
    pub tasks: Vec<TaskMetrics>,
    pub routing_accuracy: Option<RoutingAccuracy>,
    pub routing: Vec<RoutingProfile>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

fn write_outputs(out: &Path, cfg: &RunConfig, report: &RunReport, started: Instant) -> AppResult<()> {
    atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_json(&out.join("report.json"), report)?;
    write_json(
        &out.join("timing.json"),
        &BTreeMap::from([("wall_time_s", started.elapsed().as_secs_f64())]),
    )
}

fn progress(verbose: bool) -> impl FnMut(&str) {
    move |msg: &str| {
        if verbose {
            eprintln!("{msg}");
        }
    }
}

fn report(command: &str, cfg: &RunConfig) -> RunReport {
    RunReport {
        schema_version: 1,
        command: command.to_string(),
        config_hash: cfg.config_hash(),
        epochs: Vec::new(),
        metrics: BTreeMap::new(),
        tasks: Vec::new(),
        routing_accuracy: None,
        routing: Vec::new(),
    }
}

fn save_checkpoint(out: &Path, outcome: &TrainOutcome, data: &Dataset) -> AppResult<()> {
    outcome.checkpoint(&data.vocab).save(&out.join("checkpoint.bin"))
}

fn run_grad_check(seed: u64, out: Option<&Path>) -> AppResult<bool> {
    let checks: Vec<BlockCheck> = block_suite(seed, GRAD_CHECK_H, 16)?;
    let mut all = true;
    let mut rows = BTreeMap::new();
    for c in &checks {
        let ok = c.report.passes(GRAD_CHECK_TOL);
        all &= ok;
        println!(
            "{:<22} max_rel_err={:.3e} coords={} {}",
            c.block,
            c.report.max_rel_err,
            c.report.coords,
            if ok { "PASS" } else { "FAIL" }
        );
        rows.insert(c.block.to_string(), c.report.max_rel_err);
    }
    if let Some(dir) = out {
        write_json(&dir.join("grad_check.json"), &rows)?;
    }
    Ok(all)
}

fn run(cli: Cli) -> AppResult<()> {
    let started = Instant::now();
    let mut log = progress(cli.verbose);
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve_config(&common, None, true)?;
            let data = crate::experiment::generate_dataset(&cfg)?;
            data.write(&common.out)?;
            atomic_write(&common.out.join("config.toml"), cfg.to_toml().as_bytes())?;
        }
        Command::Pretrain { common, data } => {
            let cfg = resolve_config(&common, None, true)?;
            let dataset = Dataset::read(&data)?;
            let outcome = pretrain(&cfg, &dataset, &mut log)?;
            let model = &outcome.trainer.model;
            let acc = routing_accuracy(model, &dataset.vocab, &dataset.pretrain_held, cfg.eval.batch_size)?;
            let mut rep = report("pretrain", &cfg);
            rep.metrics.insert("routing_top1".into(), acc.mean);
            rep.metrics.insert("routing_top1_raw".into(), acc.raw_mean);
            rep.routing_accuracy = Some(acc);
            rep.epochs = outcome.epochs.clone();
            save_checkpoint(&common.out, &outcome, &dataset)?;
            write_outputs(&common.out, &cfg, &rep, started)?;
        }
        Command::Adapt {
            common,
            data,
            checkpoint,
            task,
        } => {
            let cfg = resolve_config(&common, Some(&task), false)?;
            let dataset = Dataset::read(&data)?;
            let base = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = adapt(&cfg, &dataset, base.as_ref(), &mut log)?;
            let model = &outcome.trainer.model;
            let t = DownstreamTask::parse(&cfg.adapt.task)?;
            let test = &dataset.task(&cfg.adapt.task)?.test;
            let mode = cfg.ablations.routing_mode();
            let m = evaluate_task(model, &dataset.vocab, t, test, &cfg.eval, &mode)?;
            let mut rep = report("adapt", &cfg);
            rep.metrics.insert(format!("{}.{}", m.task, m.metric), m.value);
            rep.tasks.push(m);
            rep.routing
                .push(extract_routing(model, &dataset.vocab, t.name(), test, cfg.eval.batch_size)?);
            rep.epochs = outcome.epochs.clone();
            save_checkpoint(&common.out, &outcome, &dataset)?;
            write_outputs(&common.out, &cfg, &rep, started)?;
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            task,
        } => {
            let cfg = resolve_config(&common, Some(&task), false)?;
            let dataset = Dataset::read(&data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = prepare_model(&cfg, &dataset.vocab, Some(&ckpt))?;
            let t = DownstreamTask::parse(&cfg.adapt.task)?;
            let test = &dataset.task(&cfg.adapt.task)?.test;
            let m = evaluate_task(&model, &dataset.vocab, t, test, &cfg.eval, &cfg.ablations.routing_mode())?;
            let mut rep = report("eval", &cfg);
            rep.metrics.insert(format!("{}.{}", m.task, m.metric), m.value);
            rep.tasks.push(m);
            write_outputs(&common.out, &cfg, &rep, started)?;
        }
        Command::Analyze {
            common,
            data,
            checkpoint,
            sets,
        } => {
            let cfg = resolve_config(&common, None, false)?;
            let dataset = Dataset::read(&data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.to_model()?;
            let mut profiles = Vec::new();
            for name in sets.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let instances: Vec<_> = if let Ok(skill) = Skill::parse(name) {
                    dataset
                        .pretrain_held
                        .iter()
                        .filter(|i| i.skill == Some(skill))
                        .cloned()
                        .collect()
                } else {
                    dataset.task(name)?.test.clone()
                };
                profiles.push(extract_routing(&model, &dataset.vocab, name, &instances, cfg.eval.batch_size)?);
            }
            let mut metrics = BTreeMap::new();
            for p in &profiles {
                metrics.insert(format!("{}.step1_argmax", p.task), p.argmax(0) as f64);
            }
            emit_report(&profiles, &metrics, &common.out)?;
            atomic_write(&common.out.join("config.toml"), cfg.to_toml().as_bytes())?;
        }
        Command::GradCheck { seed, out } => {
            if !run_grad_check(seed, out.as_deref())? {
                return Err(skillmix_core::Error::Validation(format!(
                    "gradient check exceeded relative error {GRAD_CHECK_TOL:e}"
                ))
                .into());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs, prints a one-line error on failure and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: kind=usage msg={msg}");
            2
        }
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}
