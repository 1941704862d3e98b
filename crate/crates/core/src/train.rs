//! Losses, optimizer, freezing, ablation switches and single training steps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{SkillInstance, Vocabulary};
use crate::encoder::{EncoderState, RoutingMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamGroup, ParamStore};
use crate::seq2seq::teacher_forcing_loss;
use crate::tape::{ParamGrads, Tape, Var};
use crate::tensor::Tensor;

/// How the router is supervised during pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingTarget {
    /// Softmax cross-entropy against 0.5 skill + 0.5 general.
    #[default]
    Split,
    /// Independent binary cross-entropy per skill, label 1 on skill and general.
    Binary,
}

/// Index of the shared "general" skill: always the last one.
pub fn general_index(n_skills: usize) -> usize {
    n_skills - 1
}

/// Target row for one instance.
pub fn routing_target(skill: usize, n_skills: usize, kind: RoutingTarget) -> Vec<f64> {
    let general = general_index(n_skills);
    let mut t = alloc::vec![0.0; n_skills];
    match kind {
        RoutingTarget::Split if skill == general => t[general] = 1.0,
        RoutingTarget::Split => {
            t[skill] = 0.5;
            t[general] = 0.5;
        }
        RoutingTarget::Binary => {
            t[skill] = 1.0;
            t[general] = 1.0;
        }
    }
    t
}

/// Router supervision averaged over steps (each step averages over the batch).
pub fn routing_loss(tape: &mut Tape<'_>, state: &EncoderState, skills: &[Option<usize>], kind: RoutingTarget) -> Result<Var> {
    if state.steps.is_empty() {
        return Err(Error::Contract("routing loss needs at least one reasoning step".into()));
    }
    let n = tape.value(state.steps[0].router_logits).cols();
    let mut target = Tensor::zeros(&[skills.len(), n]);
    for (i, s) in skills.iter().enumerate() {
        let s = s.ok_or_else(|| Error::Contract(format!("instance {i} has no skill label for the routing loss")))?;
        if s >= n {
            return Err(Error::Contract(format!("skill index {s} out of range for {n} skills")));
        }
        target.data_mut()[i * n..(i + 1) * n].copy_from_slice(&routing_target(s, n, kind));
    }
    let mut total: Option<Var> = None;
    for step in &state.steps {
        let l = match kind {
            RoutingTarget::Split => tape.cross_entropy(step.router_logits, &target)?,
            RoutingTarget::Binary => tape.bce_with_logits(step.router_logits, &target)?,
        };
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("non-empty steps");
    Ok(tape.scale(total, 1.0 / state.steps.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_ratio: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_ratio: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn adapt() -> Self {
        AdamConfig {
            lr: 1e-4,
            ..AdamConfig::default()
        }
    }
}

/// Linear warmup over the first `ratio` of training, then constant.
pub fn warmup_lr(base: f64, step: usize, total_steps: usize, ratio: f64) -> f64 {
    let warm = libm::ceil(total_steps as f64 * ratio) as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * (step + 1) as f64 / warm as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| alloc::vec![0.0; p.tensor.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Clips `grads` to the global norm, then updates every trainable
    /// parameter that has a gradient. Returns the pre-clip norm.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut ParamGrads, lr: f64) -> f64 {
        let norm = grads.clip_global_norm(self.config.clip_norm);
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let w = store.tensor_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        norm
    }
}

/// `true` marks a frozen group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeMask {
    pub embeddings: bool,
    pub representation: bool,
    pub reasoning_modules: bool,
    pub adapters: bool,
    pub routers: bool,
    pub stop_gates: bool,
    pub decoder: bool,
}

impl FreezeMask {
    pub fn is_frozen(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Embeddings => self.embeddings,
            ParamGroup::Representation => self.representation,
            ParamGroup::ReasoningModules => self.reasoning_modules,
            ParamGroup::Adapters => self.adapters,
            ParamGroup::Routers => self.routers,
            ParamGroup::StopGates => self.stop_gates,
            ParamGroup::Decoder => self.decoder,
        }
    }

    pub fn freeze(&mut self, g: ParamGroup) {
        match g {
            ParamGroup::Embeddings => self.embeddings = true,
            ParamGroup::Representation => self.representation = true,
            ParamGroup::ReasoningModules => self.reasoning_modules = true,
            ParamGroup::Adapters => self.adapters = true,
            ParamGroup::Routers => self.routers = true,
            ParamGroup::StopGates => self.stop_gates = true,
            ParamGroup::Decoder => self.decoder = true,
        }
    }

    /// Comma-separated group names, e.g. `rm,representation`.
    pub fn parse(s: &str) -> Result<FreezeMask> {
        let mut mask = FreezeMask::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            mask.freeze(ParamGroup::parse(part)?);
        }
        Ok(mask)
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.iter().copied().filter(|&g| self.is_frozen(g)).collect()
    }

    pub fn apply(&self, store: &mut ParamStore) {
        for g in ParamGroup::ALL {
            store.set_group_trainable(g, !self.is_frozen(g));
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Depth 1 without adapters.
    pub single_depth: bool,
    pub no_adapter: bool,
    /// Routing loss disabled.
    pub no_modularity: bool,
    /// Overrides `top_k`.
    pub sparse_k: Option<usize>,
    pub full_activation: bool,
}

impl Ablations {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.full_activation && self.sparse_k.is_some() {
            return Err(Error::Validation("full_activation and sparse_k are mutually exclusive".into()));
        }
        if let Some(k) = self.sparse_k {
            if k == 0 || k > cfg.n_skills {
                return Err(Error::Validation(format!("sparse_k {k} outside 1..={}", cfg.n_skills)));
            }
        }
        Ok(())
    }

    /// Architecture changes implied by the ablations.
    pub fn apply_to_config(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        self.validate(cfg)?;
        let mut c = cfg.clone();
        if self.single_depth {
            c.depth = 1;
            c.use_adapters = false;
        }
        if self.no_adapter {
            c.use_adapters = false;
        }
        if let Some(k) = self.sparse_k {
            c.top_k = k;
        }
        Ok(c)
    }

    pub fn routing_mode(&self) -> RoutingMode {
        if self.full_activation {
            RoutingMode::Full
        } else {
            RoutingMode::Learned
        }
    }

    /// Effective routing-loss weight.
    pub fn lambda(&self, lambda: f64) -> f64 {
        if self.no_modularity {
            0.0
        } else {
            lambda
        }
    }
}

/// Tokenized instances ready for a step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub skills: Vec<Option<usize>>,
}

impl Batch {
    pub fn from_instances(vocab: &Vocabulary, instances: &[SkillInstance]) -> Batch {
        Batch {
            inputs: instances.iter().map(|i| vocab.tokenize(&i.input)).collect(),
            targets: instances.iter().map(|i| vocab.target_ids(&i.target)).collect(),
            skills: instances.iter().map(|i| i.skill.map(|s| s.index())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub tf: f64,
    pub routing: f64,
    pub grad_norm: f64,
}

/// Model plus optimizer state and the knobs a step needs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub lambda: f64,
    pub mode: RoutingMode,
    pub routing_target: RoutingTarget,
    /// Steps the warmup schedule is computed over.
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig, total_steps: usize) -> Trainer {
        let optimizer = Adam::new(adam, &model.store);
        Trainer {
            model,
            optimizer,
            lambda: 1.0,
            mode: RoutingMode::Learned,
            routing_target: RoutingTarget::Split,
            total_steps,
        }
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.optimizer.config;
        warmup_lr(c.lr, self.optimizer.step as usize, self.total_steps, c.warmup_ratio)
    }

    /// Losses without updating anything.
    pub fn evaluate(&self, batch: &Batch, with_routing: bool) -> Result<StepLosses> {
        let mut tape = Tape::inference(&self.model.store);
        let (total, tf, r) = self.forward(&mut tape, batch, with_routing)?;
        Ok(StepLosses {
            total: tape.value(total).item(),
            tf: tape.value(tf).item(),
            routing: r.map_or(0.0, |r| tape.value(r).item()),
            grad_norm: 0.0,
        })
    }

    fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, with_routing: bool) -> Result<(Var, Var, Option<Var>)> {
        let state = self.model.encode(tape, &batch.inputs, &self.mode)?;
        let tf = teacher_forcing_loss(&self.model, tape, &state, &batch.targets)?;
        if !with_routing {
            return Ok((tf, tf, None));
        }
        let r = routing_loss(tape, &state, &batch.skills, self.routing_target)?;
        let total = if self.lambda == 0.0 {
            tf
        } else {
            let w = tape.scale(r, self.lambda);
            tape.add(tf, w)?
        };
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value}; routing weights per step: {}",
                routing_dump(&state)
            )));
        }
        Ok((total, tf, Some(r)))
    }

    fn step(&mut self, batch: &Batch, with_routing: bool) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let lr = self.current_lr();
        let (losses, mut grads) = {
            let mut tape = Tape::with_params(&self.model.store);
            let (total, tf, r) = self.forward(&mut tape, batch, with_routing)?;
            let losses = StepLosses {
                total: tape.value(total).item(),
                tf: tape.value(tf).item(),
                routing: r.map_or(0.0, |r| tape.value(r).item()),
                grad_norm: 0.0,
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFinite(format!("teacher-forcing loss {}", losses.tf)));
            }
            (losses, tape.backward(total)?.into_params())
        };
        let norm = self.optimizer.apply(&mut self.model.store, &mut grads, lr);
        Ok(StepLosses {
            grad_norm: norm,
            ..losses
        })
    }

    /// `loss_tf + λ·loss_r`, backward, clip, update. Every instance needs a skill label.
    pub fn pretrain_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        self.step(batch, true)
    }

    /// Teacher forcing only; frozen groups are untouched.
    pub fn adapt_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        if !self.model.store.iter().any(|(_, p)| p.trainable) {
            return Err(Error::Contract("every parameter group is frozen".into()));
        }
        self.step(batch, false)
    }
}

fn routing_dump(state: &EncoderState) -> String {
    let mut s = String::new();
    for step in &state.steps {
        s.push_str(&format!("step {}: ", step.decisions.first().map_or(0, |d| d.step)));
        for d in &step.decisions {
            s.push_str(&format!("{:?} ", d.weights));
        }
    }
    s
}

/// Predicted skill for routing accuracy. "general" is part of every label,
/// so for a non-general instance the prediction is the best non-general skill.
pub fn routing_prediction(weights: &[f64], label: usize) -> usize {
    let general = general_index(weights.len());
    let candidates: Vec<usize> = if label == general {
        (0..weights.len()).collect()
    } else {
        (0..general).collect()
    };
    let mut best = candidates[0];
    for &j in &candidates {
        if weights[j] > weights[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_target_examples() {
        assert_eq!(routing_target(1, 6, RoutingTarget::Split), alloc::vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.5]);
        assert_eq!(routing_target(5, 6, RoutingTarget::Split), alloc::vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(routing_target(0, 6, RoutingTarget::Binary), alloc::vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        assert!((warmup_lr(1.0, 0, 100, 0.1) - 0.1).abs() < 1e-15);
        assert!((warmup_lr(1.0, 4, 100, 0.1) - 0.5).abs() < 1e-15);
        assert_eq!(warmup_lr(1.0, 10, 100, 0.1), 1.0);
        assert_eq!(warmup_lr(1.0, 99, 100, 0.1), 1.0);
        assert_eq!(warmup_lr(1.0, 0, 100, 0.0), 1.0);
    }

    #[test]
    fn freeze_mask_parse() {
        let m = FreezeMask::parse("rm, representation").unwrap();
        assert!(m.reasoning_modules && m.representation && !m.decoder);
        assert!(FreezeMask::parse("bogus").is_err());
    }

    #[test]
    fn prediction_ignores_shared_general_label() {
        let w = [0.05, 0.4, 0.05, 0.0, 0.0, 0.5];
        assert_eq!(routing_prediction(&w, 1), 1);
        assert_eq!(routing_prediction(&w, 5), 5);
    }

    #[test]
    fn ablation_conflicts_rejected() {
        let cfg = ModelConfig::tiny();
        let a = Ablations {
            full_activation: true,
            sparse_k: Some(2),
            ..Ablations::default()
        };
        assert!(matches!(a.validate(&cfg), Err(Error::Validation(_))));
        let single = Ablations {
            single_depth: true,
            ..Ablations::default()
        }
        .apply_to_config(&cfg)
        .unwrap();
        assert_eq!(single.depth, 1);
        assert!(!single.use_adapters);
        let nm = Ablations {
            no_modularity: true,
            ..Ablations::default()
        };
        assert_eq!(nm.lambda(1.0), 0.0);
    }
}
