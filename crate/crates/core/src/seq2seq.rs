//! Decoder, teacher forcing, greedy generation and option scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::vocab::{Vocabulary, BOS, EOS};
use crate::encoder::{EncoderState, RoutingMode};
use crate::error::{Error, Result};
use crate::math;
use crate::model::Model;
use crate::nn::{self_layout, CrossInput, LayerNorm, TransformerLayer};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{AttnLayout, AttnMask, Segments, Tape, Var};
use crate::tensor::Tensor;

/// Causal self-attention plus cross-attention over the encoder output. The
/// output projection is the (tied) token embedding table.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<TransformerLayer>,
    pub memory_norm: LayerNorm,
    pub final_norm: LayerNorm,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            layers.push(TransformerLayer::new(
                store,
                &format!("dec.{l}"),
                cfg.d_model,
                cfg.n_heads,
                cfg.d_ff,
                true,
                ParamGroup::Decoder,
                rng,
            )?);
        }
        Ok(Decoder {
            layers,
            memory_norm: LayerNorm::new(store, "dec.memory_norm", cfg.d_model, ParamGroup::Decoder),
            final_norm: LayerNorm::new(store, "dec.final_norm", cfg.d_model, ParamGroup::Decoder),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionScoring {
    #[default]
    Sum,
    LengthNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredOption {
    pub text: String,
    /// `<s> option </s>`.
    pub ids: Vec<usize>,
    /// Per predicted token (everything after `<s>`).
    pub token_log_probs: Vec<f64>,
    pub total: f64,
    pub normalized: f64,
}

fn check_target(t: &[usize]) -> Result<()> {
    if t.len() < 2 || t[0] != BOS || *t.last().unwrap() != EOS {
        return Err(Error::Validation(format!(
            "decoder target must start with <s>, end with </s> and be non-empty, got {t:?}"
        )));
    }
    Ok(())
}

/// Next-token logits for decoder inputs. Sequence `i` cross-attends to encoder
/// instance `enc_index[i]` of `memory`.
pub fn decoder_logits(
    model: &Model,
    tape: &mut Tape<'_>,
    memory: Var,
    enc_segments: &Segments,
    dec_inputs: &[Vec<usize>],
    enc_index: &[usize],
) -> Result<(Var, Segments)> {
    let cfg = &model.config;
    if enc_index.len() != dec_inputs.len() || enc_index.iter().any(|&i| i >= enc_segments.len()) {
        return Err(Error::Contract("decoder/encoder instance mapping out of range".into()));
    }
    let (mut x, segs) = model.embedding.forward(tape, dec_inputs)?;
    let dec = &model.decoder;
    let mem = dec.memory_norm.forward(tape, memory, cfg.ln_eps)?;
    let cross = CrossInput {
        memory: mem,
        layout: AttnLayout {
            q_segments: segs.clone(),
            k_segments: enc_index.iter().map(|&i| enc_segments[i]).collect(),
            mask: AttnMask::None,
        },
    };
    let layout = self_layout(&segs, true);
    for layer in &dec.layers {
        x = layer.forward(tape, x, &layout, Some(&cross), None, cfg.ln_eps)?;
    }
    let h = dec.final_norm.forward(tape, x, cfg.ln_eps)?;
    let table = tape.param(model.embedding.table);
    let logits = tape.matmul_nt(h, table)?;
    Ok((logits, segs))
}

/// Mean next-token cross-entropy over every target position of the batch.
pub fn teacher_forcing_loss(model: &Model, tape: &mut Tape<'_>, state: &EncoderState, targets: &[Vec<usize>]) -> Result<Var> {
    if targets.len() != state.segments.len() {
        return Err(Error::Contract("one target per encoded instance".into()));
    }
    let mut inputs = Vec::with_capacity(targets.len());
    let mut labels = Vec::new();
    for t in targets {
        check_target(t)?;
        inputs.push(t[..t.len() - 1].to_vec());
        labels.extend_from_slice(&t[1..]);
    }
    let index: Vec<usize> = (0..targets.len()).collect();
    let (logits, _) = decoder_logits(model, tape, state.output(), &state.segments, &inputs, &index)?;
    let v = model.config.vocab_size;
    let mut onehot = Tensor::zeros(&[labels.len(), v]);
    for (r, &l) in labels.iter().enumerate() {
        if l >= v {
            return Err(Error::Tokenization { id: l, vocab: v });
        }
        onehot.data_mut()[r * v + l] = 1.0;
    }
    tape.cross_entropy(logits, &onehot)
}

/// Log-probability of each gold next token under teacher forcing.
pub fn target_log_probs(model: &Model, input: &[usize], target: &[usize], mode: &RoutingMode) -> Result<Vec<f64>> {
    check_target(target)?;
    let mut tape = Tape::inference(&model.store);
    let state = model.encode(&mut tape, &[input.to_vec()], mode)?;
    let (logits, _) = decoder_logits(
        model,
        &mut tape,
        state.output(),
        &state.segments,
        &[target[..target.len() - 1].to_vec()],
        &[0],
    )?;
    Ok(row_log_probs(tape.value(logits), 0, &target[1..]))
}

fn row_log_probs(logits: &Tensor, first_row: usize, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(t, &l)| {
            let row = logits.row(first_row + t);
            row[l] - math::log_sum_exp(row)
        })
        .collect()
}

/// Greedy decoding for a batch. Each output holds the tokens produced after
/// `<s>`, including `</s>` when it was generated, at most `max_new` of them.
pub fn generate_batch(model: &Model, inputs: &[Vec<usize>], max_new: usize, mode: &RoutingMode) -> Result<Vec<Vec<usize>>> {
    if max_new == 0 {
        return Err(Error::Validation("max_len must be at least 1".into()));
    }
    let max_new = max_new.min(model.config.max_len.saturating_sub(1).max(1));
    let mut tape = Tape::inference(&model.store);
    let state = model.encode(&mut tape, inputs, mode)?;
    let memory = state.output();
    let mut prefixes: Vec<Vec<usize>> = alloc::vec![alloc::vec![BOS]; inputs.len()];
    let mut done = alloc::vec![false; inputs.len()];
    for _ in 0..max_new {
        let live: Vec<usize> = (0..inputs.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let dec_inputs: Vec<Vec<usize>> = live.iter().map(|&i| prefixes[i].clone()).collect();
        let (logits, segs) = decoder_logits(model, &mut tape, memory, &state.segments, &dec_inputs, &live)?;
        let lv = tape.value(logits);
        let mut next = Vec::with_capacity(live.len());
        for (&(start, len), &i) in segs.iter().zip(&live) {
            next.push((i, argmax(lv.row(start + len - 1))));
        }
        for (i, tok) in next {
            prefixes[i].push(tok);
            if tok == EOS {
                done[i] = true;
            }
        }
    }
    Ok(prefixes.into_iter().map(|mut p| p.split_off(1)).collect())
}

pub fn generate(model: &Model, input: &[usize], max_new: usize, mode: &RoutingMode) -> Result<Vec<usize>> {
    Ok(generate_batch(model, &[input.to_vec()], max_new, mode)?.remove(0))
}

/// Lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scores `<s> option </s>` for each option against one encoding of the input.
pub fn score_options(
    model: &Model,
    vocab: &Vocabulary,
    input: &[usize],
    options: &[&str],
    scoring: OptionScoring,
    mode: &RoutingMode,
) -> Result<(usize, Vec<ScoredOption>)> {
    if options.len() < 2 {
        return Err(Error::Validation("option scoring needs at least two options".into()));
    }
    let mut targets = Vec::with_capacity(options.len());
    for o in options {
        if o.split_whitespace().next().is_none() {
            return Err(Error::Validation("empty option text".into()));
        }
        targets.push(vocab.target_ids(o));
    }
    let mut tape = Tape::inference(&model.store);
    let state = model.encode(&mut tape, &[input.to_vec()], mode)?;
    let dec_inputs: Vec<Vec<usize>> = targets.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let index = alloc::vec![0; targets.len()];
    let (logits, segs) = decoder_logits(model, &mut tape, state.output(), &state.segments, &dec_inputs, &index)?;
    let lv = tape.value(logits);
    let scored: Vec<ScoredOption> = options
        .iter()
        .zip(targets)
        .zip(&segs)
        .map(|((text, ids), &(start, _))| {
            let token_log_probs = row_log_probs(lv, start, &ids[1..]);
            let total: f64 = token_log_probs.iter().sum();
            let normalized = total / token_log_probs.len() as f64;
            ScoredOption {
                text: String::from(*text),
                ids,
                token_log_probs,
                total,
                normalized,
            }
        })
        .collect();
    let key = |s: &ScoredOption| match scoring {
        OptionScoring::Sum => s.total,
        OptionScoring::LengthNormalized => s.normalized,
    };
    let keys: Vec<f64> = scored.iter().map(key).collect();
    Ok((argmax(&keys), scored))
}
