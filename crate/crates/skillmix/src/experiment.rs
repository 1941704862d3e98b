//! Dataset generation and the pretrain / adapt / eval protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skillmix_core::corpus::{gen_downstream, gen_skill_instance, DownstreamTask, Skill, SkillInstance, SyntheticWorld, Vocabulary};
use skillmix_core::encoder::RoutingMode;
use skillmix_core::seq2seq::{generate_batch, score_options};
use skillmix_core::tape::Tape;
use skillmix_core::train::{routing_prediction, Batch, Trainer};
use skillmix_core::{Error, Model, ModelConfig};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{EvalConfig, RunConfig};
use crate::error::{AppError, AppResult};
use crate::io::{read_jsonl, read_vocab, write_jsonl, write_vocab};

/// Stream ids of the seeded generators, one per split.
const STREAM_PRETRAIN_HELD: u64 = 1;
const STREAM_PRETRAIN_TRAIN: u64 = 2;
const STREAM_DOWNSTREAM: u64 = 10;
const STREAM_ORDER: u64 = 100;

/// Give up when a unique split needs more draws than this multiple of its size.
const DRAW_BUDGET: usize = 50;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSplits {
    pub train: Vec<SkillInstance>,
    pub test: Vec<SkillInstance>,
    pub few_shot: Vec<SkillInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub pretrain_train: Vec<SkillInstance>,
    pub pretrain_held: Vec<SkillInstance>,
    pub tasks: BTreeMap<String, TaskSplits>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` instances with distinct inputs that are not in `exclude`.
fn unique_draws(
    n: usize,
    exclude: &BTreeSet<String>,
    mut draw: impl FnMut() -> skillmix_core::Result<SkillInstance>,
) -> AppResult<Vec<SkillInstance>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut budget = n.max(1) * DRAW_BUDGET;
    while out.len() < n {
        if budget == 0 {
            return Err(Error::Generation(format!("could only draw {} of {n} distinct instances", out.len())).into());
        }
        budget -= 1;
        let inst = draw()?;
        if exclude.contains(&inst.input) || !seen.insert(inst.input.clone()) {
            continue;
        }
        out.push(inst);
    }
    Ok(out)
}

/// Builds the world and every split from `cfg.seed`. Pretraining training data
/// repeats freely (the fact skill has fewer distinct facts than instances) but
/// never contains a held-out input; downstream splits are distinct inputs with
/// test and train disjoint.
pub fn generate_dataset(cfg: &RunConfig) -> AppResult<Dataset> {
    let world = SyntheticWorld::build(cfg.seed, cfg.world)?;
    let vocab = Vocabulary::for_world(&world);

    let mut held = Vec::new();
    let mut rng = rng_for(cfg.seed, STREAM_PRETRAIN_HELD);
    for skill in Skill::ALL {
        held.extend(unique_draws(cfg.data.held_out_per_skill, &BTreeSet::new(), || {
            Ok(gen_skill_instance(&world, skill, &mut rng))
        })?);
    }
    let held_inputs: BTreeSet<String> = held.iter().map(|i| i.input.clone()).collect();

    // skills interleaved round-robin: uniform mixing
    let mut rng = rng_for(cfg.seed, STREAM_PRETRAIN_TRAIN);
    let mut train = Vec::with_capacity(cfg.data.per_skill * Skill::ALL.len());
    let mut budget = cfg.data.per_skill.max(1) * Skill::ALL.len() * DRAW_BUDGET;
    for _ in 0..cfg.data.per_skill {
        for skill in Skill::ALL {
            loop {
                if budget == 0 {
                    return Err(Error::Generation("held-out inputs exhaust the pretraining pool".into()).into());
                }
                budget -= 1;
                let inst = gen_skill_instance(&world, skill, &mut rng);
                if !held_inputs.contains(&inst.input) {
                    train.push(inst);
                    break;
                }
            }
        }
    }

    let mut tasks = BTreeMap::new();
    for (t, task) in [DownstreamTask::Hop2Qa, DownstreamTask::LogicFact, DownstreamTask::TypedHop2]
        .into_iter()
        .enumerate()
    {
        let mut rng = rng_for(cfg.seed, STREAM_DOWNSTREAM + t as u64);
        let test = unique_draws(cfg.data.downstream_test, &BTreeSet::new(), || gen_downstream(&world, task, &mut rng))?;
        let test_inputs: BTreeSet<String> = test.iter().map(|i| i.input.clone()).collect();
        let train = unique_draws(cfg.data.downstream_train, &test_inputs, || gen_downstream(&world, task, &mut rng))?;
        let few_shot = train[..cfg.data.few_shot.min(train.len())].to_vec();
        tasks.insert(task.name().to_string(), TaskSplits { train, test, few_shot });
    }
    Ok(Dataset {
        vocab,
        pretrain_train: train,
        pretrain_held: held,
        tasks,
    })
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> AppResult<()> {
        write_vocab(&dir.join("vocab.txt"), &self.vocab)?;
        write_jsonl(&dir.join("pretrain/train.jsonl"), &self.pretrain_train)?;
        write_jsonl(&dir.join("pretrain/held_out.jsonl"), &self.pretrain_held)?;
        for (name, s) in &self.tasks {
            let d = dir.join(name);
            write_jsonl(&d.join("train.jsonl"), &s.train)?;
            write_jsonl(&d.join("test.jsonl"), &s.test)?;
            write_jsonl(&d.join("few_shot.jsonl"), &s.few_shot)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::write`]; missing task
    /// directories are skipped.
    pub fn read(dir: &Path) -> AppResult<Dataset> {
        let vocab = read_vocab(&dir.join("vocab.txt"))?;
        let pretrain_train = read_jsonl(&dir.join("pretrain/train.jsonl"))?;
        let pretrain_held = read_jsonl(&dir.join("pretrain/held_out.jsonl"))?;
        let mut tasks = BTreeMap::new();
        for task in [DownstreamTask::Hop2Qa, DownstreamTask::LogicFact, DownstreamTask::TypedHop2] {
            let d = dir.join(task.name());
            if !d.is_dir() {
                continue;
            }
            tasks.insert(
                task.name().to_string(),
                TaskSplits {
                    train: read_jsonl(&d.join("train.jsonl"))?,
                    test: read_jsonl(&d.join("test.jsonl"))?,
                    few_shot: read_jsonl(&d.join("few_shot.jsonl"))?,
                },
            );
        }
        Ok(Dataset {
            vocab,
            pretrain_train,
            pretrain_held,
            tasks,
        })
    }

    pub fn task(&self, name: &str) -> AppResult<&TaskSplits> {
        DownstreamTask::parse(name)?;
        self.tasks
            .get(name)
            .ok_or_else(|| AppError::Usage(format!("dataset has no `{name}` task")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_tf: f64,
    pub loss_routing: f64,
    /// Teacher-forcing loss on the validation instances at the end of the epoch.
    pub val_loss_tf: f64,
}

/// Architecture after ablations, with the vocabulary size filled in.
pub fn resolved_model_config(cfg: &RunConfig, vocab: &Vocabulary) -> AppResult<ModelConfig> {
    let mut m = cfg.ablations.apply_to_config(&cfg.model)?;
    m.vocab_size = vocab.len();
    m.validate()?;
    Ok(m)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
    pub rng: RngState,
}

impl TrainOutcome {
    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint::from_model(&self.trainer.model, vocab, self.trainer.optimizer.step, self.rng.clone())
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn validation_loss(trainer: &Trainer, vocab: &Vocabulary, val: &[SkillInstance], batch: usize) -> AppResult<f64> {
    let mut losses = Vec::new();
    for chunk in val.chunks(batch) {
        let b = Batch::from_instances(vocab, chunk);
        losses.push(trainer.evaluate(&b, false)?.tf * chunk.len() as f64);
    }
    Ok(losses.iter().sum::<f64>() / val.len().max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut trainer: Trainer,
    vocab: &Vocabulary,
    data: &[SkillInstance],
    val: &[SkillInstance],
    epochs: usize,
    batch_size: usize,
    seed: u64,
    pretraining: bool,
    progress: &mut dyn FnMut(&str),
) -> AppResult<TrainOutcome> {
    let mut rng = rng_for(seed, STREAM_ORDER);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(epochs);
    let val_batch = 64;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut tf, mut r) = (Vec::new(), Vec::new(), Vec::new());
        for idx in order.chunks(batch_size) {
            let chunk: Vec<SkillInstance> = idx.iter().map(|&i| data[i].clone()).collect();
            let batch = Batch::from_instances(vocab, &chunk);
            let l = if pretraining {
                trainer.pretrain_step(&batch)?
            } else {
                trainer.adapt_step(&batch)?
            };
            tot.push(l.total);
            tf.push(l.tf);
            r.push(l.routing);
        }
        let log = EpochLog {
            epoch,
            steps: tot.len(),
            loss_total: mean(&tot),
            loss_tf: mean(&tf),
            loss_routing: mean(&r),
            val_loss_tf: validation_loss(&trainer, vocab, val, val_batch)?,
        };
        progress(&format!(
            "epoch {epoch}: loss {:.4} (tf {:.4}, routing {:.4}), val tf {:.4}",
            log.loss_total, log.loss_tf, log.loss_routing, log.val_loss_tf
        ));
        logs.push(log);
    }
    Ok(TrainOutcome {
        trainer,
        epochs: logs,
        rng: RngState {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        },
    })
}

fn steps_for(n: usize, batch: usize, epochs: usize) -> usize {
    n.div_ceil(batch) * epochs
}

/// Multi-task pretraining with the routing loss.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, progress: &mut dyn FnMut(&str)) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(resolved_model_config(cfg, &data.vocab)?, cfg.seed)?;
    let p = &cfg.pretrain;
    let mut trainer = Trainer::new(model, p.optimizer, steps_for(data.pretrain_train.len(), p.batch_size, p.epochs));
    trainer.lambda = cfg.ablations.lambda(p.lambda);
    trainer.mode = cfg.ablations.routing_mode();
    trainer.routing_target = p.routing_target;
    train_loop(
        trainer,
        &data.vocab,
        &data.pretrain_train,
        &data.pretrain_held,
        p.epochs,
        p.batch_size,
        cfg.seed,
        true,
        progress,
    )
}

/// Builds the model for adaptation or evaluation: ablated architecture,
/// weights from `base` when given (arrays the ablated model lacks are ignored).
pub fn prepare_model(cfg: &RunConfig, vocab: &Vocabulary, base: Option<&Checkpoint>) -> AppResult<Model> {
    let mut model = Model::new(resolved_model_config(cfg, vocab)?, cfg.seed)?;
    if let Some(ckpt) = base {
        if ckpt.vocabulary() != *vocab {
            return Err(Error::Validation("checkpoint vocabulary does not match the dataset".into()).into());
        }
        ckpt.restore_into(&mut model, false)?;
    }
    Ok(model)
}

/// Teacher-forcing adaptation on one downstream task.
pub fn adapt(
    cfg: &RunConfig,
    data: &Dataset,
    base: Option<&Checkpoint>,
    progress: &mut dyn FnMut(&str),
) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let a = &cfg.adapt;
    let splits = data.task(&a.task)?;
    let train = if a.few_shot { &splits.few_shot } else { &splits.train };
    let mut model = prepare_model(cfg, &data.vocab, base)?;
    a.freeze.apply(&mut model.store);
    let mut trainer = Trainer::new(model, a.optimizer, steps_for(train.len(), a.batch_size, a.epochs));
    trainer.mode = cfg.ablations.routing_mode();
    let val = &splits.test[..splits.test.len().min(200)];
    train_loop(trainer, &data.vocab, train, val, a.epochs, a.batch_size, cfg.seed, false, progress)
}

/// Lower-cased, whitespace-collapsed answer text.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    /// `exact_match` or `accuracy`.
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// Exact match via greedy generation for open-ended tasks, option scoring for
/// multiple choice.
pub fn evaluate_task(
    model: &Model,
    vocab: &Vocabulary,
    task: DownstreamTask,
    test: &[SkillInstance],
    eval: &EvalConfig,
    mode: &RoutingMode,
) -> AppResult<TaskMetrics> {
    let mut correct = 0usize;
    match task {
        DownstreamTask::Hop2Qa | DownstreamTask::TypedHop2 => {
            for chunk in test.chunks(eval.batch_size) {
                let inputs: Vec<Vec<usize>> = chunk.iter().map(|i| vocab.tokenize(&i.input)).collect();
                let outs = generate_batch(model, &inputs, eval.max_new_tokens, mode)?;
                for (inst, out) in chunk.iter().zip(outs) {
                    if normalize_answer(&vocab.decode_answer(&out)) == normalize_answer(&inst.target) {
                        correct += 1;
                    }
                }
            }
        }
        DownstreamTask::LogicFact => {
            for inst in test {
                let options = task
                    .options(inst)
                    .ok_or_else(|| Error::Validation(format!("no options in `{}`", inst.input)))?;
                let refs: Vec<&str> = options.iter().map(String::as_str).collect();
                let (best, _) = score_options(model, vocab, &vocab.tokenize(&inst.input), &refs, eval.scoring, mode)?;
                if normalize_answer(&options[best]) == normalize_answer(&inst.target) {
                    correct += 1;
                }
            }
        }
    }
    Ok(TaskMetrics {
        task: task.name().to_string(),
        metric: match task {
            DownstreamTask::LogicFact => "accuracy",
            _ => "exact_match",
        }
        .to_string(),
        value: correct as f64 / test.len().max(1) as f64,
        n: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAccuracy {
    /// Top-1 accuracy per step, with the shared "general" label set aside for
    /// non-general instances.
    pub per_step: Vec<f64>,
    pub mean: f64,
    /// Plain argmax over all skills against the instance label.
    pub raw_per_step: Vec<f64>,
    pub raw_mean: f64,
    pub n: usize,
}

/// Held-out routing top-1 accuracy against generator skill labels.
pub fn routing_accuracy(model: &Model, vocab: &Vocabulary, held: &[SkillInstance], batch: usize) -> AppResult<RoutingAccuracy> {
    let depth = model.config.depth;
    let mut hits = vec![0usize; depth];
    let mut raw = vec![0usize; depth];
    let mut n = 0;
    for chunk in held.chunks(batch) {
        let b = Batch::from_instances(vocab, chunk);
        let mut tape = Tape::inference(&model.store);
        let state = model.encode(&mut tape, &b.inputs, &RoutingMode::Learned)?;
        for (i, label) in b.skills.iter().enumerate() {
            let label = label.ok_or_else(|| Error::Contract("routing accuracy needs skill labels".into()))?;
            n += 1;
            for (s, step) in state.steps.iter().enumerate() {
                let d = &step.decisions[i];
                hits[s] += usize::from(routing_prediction(&d.weights, label) == label);
                raw[s] += usize::from(d.top1() == label);
            }
        }
    }
    let frac = |v: &[usize]| v.iter().map(|&c| c as f64 / n.max(1) as f64).collect::<Vec<_>>();
    let per_step = frac(&hits);
    let raw_per_step = frac(&raw);
    Ok(RoutingAccuracy {
        mean: mean(&per_step),
        raw_mean: mean(&raw_per_step),
        per_step,
        raw_per_step,
        n,
    })
}
