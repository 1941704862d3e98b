//! Parameter store plus the module layout that indexes into it.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::vocab::CLS;
use crate::encoder::{EncoderState, ReasonEncoder, RoutingMode};
use crate::error::{Error, Result};
use crate::nn::Embedding;
use crate::params::ParamStore;
use crate::seq2seq::Decoder;
use crate::tape::Tape;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub encoder: ReasonEncoder,
    pub decoder: Decoder,
}

impl Model {
    /// Registers parameters in a fixed order (embedding, representation,
    /// reasoning modules, routers, stop gates, decoder) from one seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(
            &mut store,
            config.vocab_size,
            config.d_model,
            config.max_len,
            config.use_positions,
            &mut rng,
        );
        let encoder = ReasonEncoder::new(&config, &mut store, &mut rng)?;
        let decoder = Decoder::new(&config, &mut store, &mut rng)?;
        Ok(Model {
            config,
            store,
            embedding,
            encoder,
            decoder,
        })
    }

    /// `[CLS]` followed by the input, truncated to `max_len`.
    pub fn encoder_input(&self, ids: &[usize]) -> Vec<usize> {
        let room = self.config.max_len - 1;
        if ids.len() > room {
            log::warn!("input of {} tokens truncated to {}", ids.len(), room);
        }
        let mut out = Vec::with_capacity(ids.len().min(room) + 1);
        out.push(CLS);
        out.extend_from_slice(&ids[..ids.len().min(room)]);
        out
    }

    /// Batched encoding of raw token ids (no `[CLS]`).
    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Vec<usize>], mode: &RoutingMode) -> Result<EncoderState> {
        if inputs.is_empty() {
            return Err(Error::Validation("cannot encode an empty batch".into()));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = inputs.iter().flatten().find(|&&id| id >= v) {
            return Err(Error::Tokenization { id: bad, vocab: v });
        }
        let seqs: Vec<Vec<usize>> = inputs.iter().map(|s| self.encoder_input(s)).collect();
        let (x, segments) = self.embedding.forward(tape, &seqs)?;
        let h0 = self.encoder.represent_rows(tape, &self.config, x, &segments)?;
        self.encoder.cascade(tape, &self.config, h0, &segments, mode)
    }
}
