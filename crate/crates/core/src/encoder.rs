//! Cascaded reasoning encoder.
//!
//! A representation stack produces `H⁰`. Each of `depth` steps then routes the
//! previous gated output `H̃ⁱ⁻¹` through a per-step skill router (a Transformer
//! layer, [CLS] pooling, FFN, softmax), executes only the top-k reasoning
//! modules, mixes their outputs with the renormalised router weights into
//! `Hⁱ`, and applies a residual stop gate to get `H̃ⁱ`.
//!
//! Reasoning-module layers are registered once per skill and reused at every
//! step; only their adapters are step specific. Routing is per instance: all
//! positions of a sequence share one decision. Instances of a batch are
//! stacked row-wise and each module runs once over the rows of the instances
//! that activated it.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, StopResidual};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self_layout, Adapter, AdapterPair, FeedForward, TransformerLayer};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Segments, Tape, Var};

/// One skill's reasoning module: layers shared across depth, adapters per step.
#[derive(Clone, Debug)]
pub struct ReasoningModule {
    pub skill: usize,
    pub layers: Vec<TransformerLayer>,
    /// `adapters[step][layer]`; empty when adapters are disabled.
    pub adapters: Vec<Vec<AdapterPair>>,
}

/// Skill router `S^i`: projection layer `T`, then an FFN from the [CLS] row
/// to `n_skills` logits.
#[derive(Clone, Debug)]
pub struct Router {
    pub projection: TransformerLayer,
    pub ffn: FeedForward,
}

/// Stop gate `G^i`: a two-layer FFN with zero-initialised output.
#[derive(Clone, Debug)]
pub struct StopGate {
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct ReasonEncoder {
    pub representation: Vec<TransformerLayer>,
    pub modules: Vec<ReasoningModule>,
    pub routers: Vec<Router>,
    pub gates: Vec<StopGate>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Top-k over the learned router distribution.
    Learned,
    /// Every step runs only this skill, with weight 1.
    Forced(usize),
    /// Every module runs, mixed by the full router distribution.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub step: usize,
    pub logits: Vec<f64>,
    /// Router distribution over all skills.
    pub weights: Vec<f64>,
    /// Active skill indices, ascending.
    pub active: Vec<usize>,
    /// Mixture weights aligned with `active`.
    pub renormalized: Vec<f64>,
}

impl RoutingDecision {
    /// Skill with the largest router weight (lowest index on ties).
    pub fn top1(&self) -> usize {
        top_k_indices(&self.weights, 1)[0]
    }
}

/// Indices of the `k` largest values, ranked; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Builds the decision for one instance from its router logits.
pub fn decide(step: usize, logits: &[f64], k: usize, mode: &RoutingMode) -> RoutingDecision {
    let mut weights = alloc::vec![0.0; logits.len()];
    math::softmax_into(logits, &mut weights);
    let (active, renormalized) = match mode {
        RoutingMode::Forced(j) => (alloc::vec![*j], alloc::vec![1.0]),
        RoutingMode::Full => ((0..logits.len()).collect(), weights.clone()),
        RoutingMode::Learned => {
            let mut active = top_k_indices(&weights, k);
            active.sort_unstable();
            let sel: Vec<f64> = active.iter().map(|&j| logits[j]).collect();
            let mut renorm = alloc::vec![0.0; sel.len()];
            math::softmax_into(&sel, &mut renorm);
            (active, renorm)
        }
    };
    RoutingDecision {
        step,
        logits: logits.to_vec(),
        weights,
        active,
        renormalized,
    }
}

/// Tape handles and decisions of one reasoning step.
#[derive(Clone, Debug)]
pub struct StepState {
    /// `B × n_skills` router logits.
    pub router_logits: Var,
    /// One decision per instance.
    pub decisions: Vec<RoutingDecision>,
    /// `Hⁱ`.
    pub mixture: Var,
    /// `H̃ⁱ`.
    pub gated: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderState {
    pub segments: Segments,
    /// `H⁰` (also `H̃⁰`).
    pub h0: Var,
    pub steps: Vec<StepState>,
}

impl EncoderState {
    /// `H̃^depth`, the decoder's memory.
    pub fn output(&self) -> Var {
        self.steps.last().map_or(self.h0, |s| s.gated)
    }

    /// Per-step decisions for instance `i`.
    pub fn decisions_for(&self, i: usize) -> Vec<&RoutingDecision> {
        self.steps.iter().map(|s| &s.decisions[i]).collect()
    }
}

impl ReasonEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let mut representation = Vec::with_capacity(cfg.rep_layers);
        for l in 0..cfg.rep_layers {
            representation.push(TransformerLayer::new(
                store,
                &format!("rep.{l}"),
                d,
                cfg.n_heads,
                cfg.d_ff,
                false,
                ParamGroup::Representation,
                rng,
            )?);
        }
        let mut modules = Vec::with_capacity(cfg.n_skills);
        for j in 0..cfg.n_skills {
            let mut layers = Vec::with_capacity(cfg.rm_layers);
            for l in 0..cfg.rm_layers {
                layers.push(TransformerLayer::new(
                    store,
                    &format!("rm.{j}.layer{l}"),
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    false,
                    ParamGroup::ReasoningModules,
                    rng,
                )?);
            }
            let mut adapters = Vec::new();
            if cfg.use_adapters {
                for s in 0..cfg.depth {
                    let per_layer = (0..cfg.rm_layers)
                        .map(|l| {
                            [0, 1].map(|site| {
                                Adapter::new(
                                    store,
                                    &format!("rm.{j}.step{s}.layer{l}.adapter{site}"),
                                    d,
                                    cfg.adapter_bottleneck,
                                    rng,
                                )
                            })
                        })
                        .collect();
                    adapters.push(per_layer);
                }
            }
            modules.push(ReasoningModule {
                skill: j,
                layers,
                adapters,
            });
        }
        let mut routers = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            routers.push(Router {
                projection: TransformerLayer::new(
                    store,
                    &format!("router.{s}.proj"),
                    d,
                    cfg.n_heads,
                    cfg.d_ff,
                    false,
                    ParamGroup::Routers,
                    rng,
                )?,
                // zero output: the untrained router is exactly uniform
                ffn: FeedForward::zero_output(
                    store,
                    &format!("router.{s}.ffn"),
                    d,
                    cfg.router_hidden,
                    cfg.n_skills,
                    ParamGroup::Routers,
                    rng,
                ),
            });
        }
        let gates = (0..cfg.depth)
            .map(|s| StopGate {
                ffn: FeedForward::zero_output(
                    store,
                    &format!("gate.{s}.ffn"),
                    d,
                    cfg.gate_hidden,
                    d,
                    ParamGroup::StopGates,
                    rng,
                ),
            })
            .collect();
        Ok(ReasonEncoder {
            representation,
            modules,
            routers,
            gates,
        })
    }

    /// Representation layers over already-embedded rows.
    pub fn represent_rows(&self, tape: &mut Tape<'_>, cfg: &ModelConfig, x: Var, segments: &Segments) -> Result<Var> {
        let layout = self_layout(segments, false);
        let mut h = x;
        for layer in &self.representation {
            h = layer.forward(tape, h, &layout, None, None, cfg.ln_eps)?;
        }
        Ok(h)
    }

    /// Router logits (`B × n`) and per-instance decisions.
    pub fn route(
        &self,
        tape: &mut Tape<'_>,
        cfg: &ModelConfig,
        h_tilde_prev: Var,
        segments: &Segments,
        step: usize,
        mode: &RoutingMode,
    ) -> Result<(Var, Vec<RoutingDecision>)> {
        if let RoutingMode::Forced(j) = mode {
            if *j >= cfg.n_skills {
                return Err(Error::Config(format!("forced skill {j} out of range")));
            }
        }
        let router = &self.routers[step];
        let layout = self_layout(segments, false);
        let t = router
            .projection
            .forward(tape, h_tilde_prev, &layout, None, None, cfg.ln_eps)?;
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.0).collect();
        let cls = tape.gather_rows(t, &cls_rows)?;
        let logits = router.ffn.forward(tape, cls)?;
        let lv = tape.value(logits);
        let decisions = (0..segments.len())
            .map(|i| decide(step, lv.row(i), cfg.top_k, mode))
            .collect();
        Ok((logits, decisions))
    }

    /// Runs one skill's shared layers with that step's adapters.
    pub fn rm_forward(
        &self,
        tape: &mut Tape<'_>,
        cfg: &ModelConfig,
        h: Var,
        segments: &Segments,
        skill: usize,
        step: usize,
    ) -> Result<Var> {
        let module = &self.modules[skill];
        let layout = self_layout(segments, false);
        let mut x = h;
        for (l, layer) in module.layers.iter().enumerate() {
            let adapters = module.adapters.get(step).map(|per_layer| &per_layer[l]);
            x = layer.forward(tape, x, &layout, None, adapters, cfg.ln_eps)?;
        }
        Ok(x)
    }

    /// `Hⁱ = Σ_{j ∈ active} w_j · R_j(H̃ⁱ⁻¹)`. Only active modules execute;
    /// weights are a softmax over the active logits (constant 1 when forced).
    #[allow(clippy::too_many_arguments)]
    pub fn combine(
        &self,
        tape: &mut Tape<'_>,
        cfg: &ModelConfig,
        h_tilde_prev: Var,
        segments: &Segments,
        router_logits: Var,
        decisions: &[RoutingDecision],
        step: usize,
        mode: &RoutingMode,
    ) -> Result<Var> {
        let b = segments.len();
        let k = decisions.first().map_or(0, |d| d.active.len());
        if decisions.len() != b || decisions.iter().any(|d| d.active.len() != k) {
            return Err(Error::Contract("routing decisions do not match the batch".into()));
        }
        let weights = match mode {
            RoutingMode::Forced(_) => None,
            _ => {
                let cols: Vec<usize> = decisions.iter().flat_map(|d| d.active.iter().copied()).collect();
                let sel = tape.gather_cols(router_logits, &cols, k)?;
                Some(tape.softmax_rows(sel))
            }
        };
        let total_rows: usize = segments.iter().map(|s| s.1).sum();
        let mut mixture: Option<Var> = None;
        for j in 0..cfg.n_skills {
            let members: Vec<(usize, usize)> = decisions
                .iter()
                .enumerate()
                .filter_map(|(i, d)| d.active.iter().position(|&a| a == j).map(|slot| (i, slot)))
                .collect();
            if members.is_empty() {
                continue;
            }
            let everyone = members.len() == b;
            let mut rows = Vec::new();
            let mut sub_segments = Vec::with_capacity(members.len());
            let mut weight_idx = Vec::new();
            for &(i, slot) in &members {
                let (start, len) = segments[i];
                sub_segments.push((rows.len(), len));
                rows.extend(start..start + len);
                weight_idx.extend(core::iter::repeat_n(i * k + slot, len));
            }
            let input = if everyone {
                h_tilde_prev
            } else {
                tape.gather_rows(h_tilde_prev, &rows)?
            };
            let segs = if everyone { segments.clone() } else { sub_segments };
            let mut out = self.rm_forward(tape, cfg, input, &segs, j, step)?;
            if let Some(w) = weights {
                out = tape.scale_rows_by(out, w, &weight_idx)?;
            }
            let term = if everyone {
                out
            } else {
                tape.scatter_rows(out, &rows, total_rows)?
            };
            mixture = Some(match mixture {
                None => term,
                Some(m) => tape.add(m, term)?,
            });
        }
        mixture.ok_or_else(|| Error::Contract("no reasoning module was activated".into()))
    }

    /// `H̃ⁱ = base + G^i(Hⁱ)`.
    pub fn stop_gate(&self, tape: &mut Tape<'_>, base: Var, h_mixture: Var, step: usize) -> Result<Var> {
        let g = self.gates[step].ffn.forward(tape, h_mixture)?;
        tape.add(base, g)
    }

    /// Full cascade over embedded rows. `H̃⁰ = H⁰`; the stop-gate residual base
    /// follows `cfg.stop_residual`.
    pub fn cascade(
        &self,
        tape: &mut Tape<'_>,
        cfg: &ModelConfig,
        h0: Var,
        segments: &Segments,
        mode: &RoutingMode,
    ) -> Result<EncoderState> {
        let mut steps = Vec::with_capacity(cfg.depth);
        let mut prev_mix = h0;
        let mut prev_gated = h0;
        for step in 0..cfg.depth {
            let (logits, decisions) = self.route(tape, cfg, prev_gated, segments, step, mode)?;
            let mixture = self.combine(tape, cfg, prev_gated, segments, logits, &decisions, step, mode)?;
            let base = match cfg.stop_residual {
                StopResidual::PreGate => prev_mix,
                StopResidual::PostGate => prev_gated,
            };
            let gated = self.stop_gate(tape, base, mixture, step)?;
            steps.push(StepState {
                router_logits: logits,
                decisions,
                mixture,
                gated,
            });
            prev_mix = mixture;
            prev_gated = gated;
        }
        Ok(EncoderState {
            segments: segments.clone(),
            h0,
            steps,
        })
    }
}
