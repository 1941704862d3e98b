//! Transformer building blocks over the tape.
//!
//! Layers are pre-norm: `x + sublayer(norm(x))`. In reasoning modules a
//! bottleneck adapter sits inside each residual branch, right after the
//! attention and feed-forward sublayers.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{AttnLayout, AttnMask, Segments, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(d_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / math::sqrt(d_in as f64);
        let w = store.normal(format!("{name}.w"), &[d_in, d_out], std, group, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out], group));
        Linear { w, b }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, group: ParamGroup) -> Self {
        let w = store.zeros(format!("{name}.w"), &[d_in, d_out], group);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out], group));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        LayerNorm {
            gamma: store.ones(format!("{name}.gamma"), &[d], group),
            beta: store.zeros(format!("{name}.beta"), &[d], group),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

/// Multi-head attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, group, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, group, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, group, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, false, group, rng),
            heads,
        })
    }

    /// `memory` is `None` for self-attention, the keys/values source otherwise.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, memory: Option<Var>, layout: AttnLayout) -> Result<Var> {
        let src = memory.unwrap_or(x);
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, src)?;
        let v = self.wv.forward(tape, src)?;
        let o = tape.attention(q, k, v, self.heads, layout)?;
        self.wo.forward(tape, o)
    }
}

/// Two-layer ReLU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            w1: Linear::new(store, &format!("{name}.w1"), d_in, hidden, true, group, rng),
            w2: Linear::new(store, &format!("{name}.w2"), hidden, d_out, true, group, rng),
        }
    }

    /// Same shape, but the output projection starts at exactly zero.
    pub fn zero_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            w1: Linear::new(store, &format!("{name}.w1"), d_in, hidden, true, group, rng),
            w2: Linear::zeroed(store, &format!("{name}.w2"), hidden, d_out, true, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.w1.forward(tape, x)?;
        let h = tape.relu(h);
        self.w2.forward(tape, h)
    }
}

/// Residual bottleneck: `h + up(relu(down(h)))`, with `up` zero-initialised.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, bottleneck: usize, rng: &mut R) -> Self {
        Adapter {
            down: Linear::new(store, &format!("{name}.down"), d, bottleneck, true, ParamGroup::Adapters, rng),
            up: Linear::zeroed(store, &format!("{name}.up"), bottleneck, d, true, ParamGroup::Adapters),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let z = self.down.forward(tape, h)?;
        let z = tape.relu(z);
        let z = self.up.forward(tape, z)?;
        tape.add(h, z)
    }
}

/// The adapter pair of one reasoning-module layer: after attention, after FFN.
pub type AdapterPair = [Adapter; 2];

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub attn: Attention,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<CrossAttention>,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

/// Keys for cross-attention: encoder memory rows and the per-sequence layout.
pub struct CrossInput {
    pub memory: Var,
    pub layout: AttnLayout,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        with_cross: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d, group);
        let attn = Attention::new(store, &format!("{name}.attn"), d, heads, group, rng)?;
        let cross = if with_cross {
            Some(CrossAttention {
                norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d, group),
                attn: Attention::new(store, &format!("{name}.cross"), d, heads, group, rng)?,
            })
        } else {
            None
        };
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d, group);
        let ffn = FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, d, group, rng);
        Ok(TransformerLayer {
            norm1,
            attn,
            cross,
            norm2,
            ffn,
        })
    }

    /// Pre-norm layer. With `adapters`, each sublayer output passes through
    /// its adapter before the residual add.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        layout: &AttnLayout,
        cross: Option<&CrossInput>,
        adapters: Option<&AdapterPair>,
        eps: f64,
    ) -> Result<Var> {
        let n = self.norm1.forward(tape, x, eps)?;
        let mut a = self.attn.forward(tape, n, None, layout.clone())?;
        if let Some(ad) = adapters {
            a = ad[0].forward(tape, a)?;
        }
        let mut x = tape.add(x, a)?;
        if let (Some(c), Some(input)) = (&self.cross, cross) {
            let n = c.norm.forward(tape, x, eps)?;
            let a = c.attn.forward(tape, n, Some(input.memory), input.layout.clone())?;
            x = tape.add(x, a)?;
        }
        let n = self.norm2.forward(tape, x, eps)?;
        let mut f = self.ffn.forward(tape, n)?;
        if let Some(ad) = adapters {
            f = ad[1].forward(tape, f)?;
        }
        tape.add(x, f)
    }
}

/// Token table plus a fixed sinusoidal position cache.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub d_model: usize,
    positions: Tensor,
    use_positions: bool,
}

/// Sinusoidal encoding: `sin(p / 10000^(2i/d))` on even columns, `cos` on odd.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for p in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / math::powf(10000.0, exponent);
            t.data_mut()[p * d + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    t
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab: usize,
        d: usize,
        max_len: usize,
        use_positions: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / math::sqrt(d as f64);
        let table = store.normal("embed.table", &[vocab, d], std, ParamGroup::Embeddings, rng);
        Embedding {
            table,
            d_model: d,
            positions: sinusoidal_positions(max_len, d),
            use_positions,
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.rows()
    }

    /// Embeds each sequence (ids already include any special tokens) and
    /// stacks them row-wise. Token vectors are scaled by `sqrt(d_model)`.
    pub fn forward(&self, tape: &mut Tape<'_>, seqs: &[Vec<usize>]) -> Result<(Var, Segments)> {
        let d = self.d_model;
        let total: usize = seqs.iter().map(Vec::len).sum();
        let mut ids = Vec::with_capacity(total);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut pos = Tensor::zeros(&[total, d]);
        let mut start = 0;
        for s in seqs {
            if s.len() > self.max_len() {
                return Err(Error::Validation(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len(),
                    self.max_len()
                )));
            }
            ids.extend_from_slice(s);
            if self.use_positions {
                pos.data_mut()[start * d..(start + s.len()) * d].copy_from_slice(&self.positions.data()[..s.len() * d]);
            }
            segments.push((start, s.len()));
            start += s.len();
        }
        let table = tape.param(self.table);
        let e = tape.embedding(table, &ids)?;
        let e = tape.scale(e, math::sqrt(d as f64));
        let x = tape.add_const(e, &pos)?;
        Ok((x, segments))
    }
}

/// Self-attention layout helper.
pub fn self_layout(segments: &Segments, causal: bool) -> AttnLayout {
    AttnLayout::self_attention(segments.clone(), if causal { AttnMask::Causal } else { AttnMask::None })
}
