//! Architecture hyperparameters; the single source of truth for shapes.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual base of the stop gate: `H̃ⁱ = base + G(Hⁱ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopResidual {
    /// Previous step's pre-gate mixture `Hⁱ⁻¹` (with `H⁰` at the first step).
    #[default]
    PreGate,
    /// Previous step's gated output `H̃ⁱ⁻¹`.
    PostGate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filled in from the vocabulary when a model is built for a corpus.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Plain Transformer layers in the representation module.
    pub rep_layers: usize,
    /// Transformer layers inside each reasoning module.
    pub rm_layers: usize,
    pub n_skills: usize,
    /// Number of cascaded reasoning steps.
    pub depth: usize,
    /// Reasoning modules activated per step.
    pub top_k: usize,
    pub use_adapters: bool,
    pub adapter_bottleneck: usize,
    pub router_hidden: usize,
    pub gate_hidden: usize,
    pub dec_layers: usize,
    /// Longest input or target sequence, special tokens included.
    pub max_len: usize,
    pub ln_eps: f64,
    pub use_positions: bool,
    pub stop_residual: StopResidual,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale preset: d_model 64, 4 heads, 2 representation layers,
    /// 1-layer reasoning modules, depth 3, top-2 of 6 skills.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            rep_layers: 2,
            rm_layers: 1,
            n_skills: 6,
            depth: 3,
            top_k: 2,
            use_adapters: true,
            adapter_bottleneck: 16,
            router_hidden: 64,
            gate_hidden: 64,
            dec_layers: 1,
            max_len: 48,
            ln_eps: 1e-6,
            use_positions: true,
            stop_residual: StopResidual::PreGate,
        }
    }

    /// T5-base sized split: 9 representation layers, 3-layer reasoning
    /// modules, depth 3, adapter bottleneck 256.
    pub fn base_scale() -> Self {
        ModelConfig {
            vocab_size: 32128,
            d_model: 768,
            n_heads: 12,
            d_ff: 2048,
            rep_layers: 9,
            rm_layers: 3,
            n_skills: 6,
            depth: 3,
            top_k: 2,
            use_adapters: true,
            adapter_bottleneck: 256,
            router_hidden: 768,
            gate_hidden: 768,
            dec_layers: 12,
            max_len: 512,
            ln_eps: 1e-6,
            use_positions: true,
            stop_residual: StopResidual::PreGate,
        }
    }

    /// Smallest shapes that still exercise every block; used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            rep_layers: 1,
            rm_layers: 1,
            n_skills: 3,
            depth: 2,
            top_k: 2,
            use_adapters: true,
            adapter_bottleneck: 3,
            router_hidden: 6,
            gate_hidden: 6,
            dec_layers: 1,
            max_len: 16,
            ln_eps: 1e-6,
            use_positions: true,
            stop_residual: StopResidual::PreGate,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_skills == 0 {
            return fail("n_skills must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.n_skills {
            return fail(format!(
                "top_k {} must lie in 1..={} (n_skills)",
                self.top_k, self.n_skills
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.rm_layers == 0 {
            return fail("reasoning modules need at least one layer".into());
        }
        if self.use_adapters && (self.adapter_bottleneck == 0 || self.adapter_bottleneck >= self.d_model) {
            return fail(format!(
                "adapter bottleneck {} must lie in 1..{}",
                self.adapter_bottleneck, self.d_model
            ));
        }
        if self.d_ff == 0 || self.router_hidden == 0 || self.gate_hidden == 0 {
            return fail("hidden sizes must be positive".into());
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.vocab_size < crate::corpus::vocab::NUM_SPECIALS {
            return fail(format!("vocab_size {} is smaller than the special token set", self.vocab_size));
        }
        if !(self.ln_eps >= 0.0) {
            return fail("ln_eps must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let mut tiny = ModelConfig::tiny();
        tiny.vocab_size = 100;
        tiny.validate().unwrap();
        ModelConfig::base_scale().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::micro();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::micro();
        c.top_k = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::micro();
        c.adapter_bottleneck = c.d_model;
        assert!(c.validate().is_err());
        c.use_adapters = false;
        c.validate().unwrap();
    }
}
