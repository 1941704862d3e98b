//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SKMXCKPT" | u32 version | u64 meta_len | meta (JSON) |
//! u64 n_params | n × (u32 name_len | name | u32 ndim | ndim × u64 dim | f64 data…)
//! ```
//!
//! Parameters are written in registration order, so save → load → save is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use skillmix_core::corpus::Vocabulary;
use skillmix_core::{Model, ModelConfig, Tensor};

use crate::error::{AppError, AppResult};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 8] = b"SKMXCKPT";
pub const VERSION: u32 = 1;

/// Position of the data-order stream, enough to resume shuffling exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a u128).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    /// Non-special vocabulary tokens in id order.
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocabulary, step: u64, rng: RngState) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                config: model.config.clone(),
                step,
                rng,
                vocab: vocab.regular_tokens().to_vec(),
            },
            params: model.store.iter().map(|(_, p)| (p.name.clone(), p.tensor.clone())).collect(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(&self.meta.vocab)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata always serializes");
        let n_scalars: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(32 + meta.len() + n_scalars * 8 + self.params.len() * 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> AppResult<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(AppError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(AppError::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| AppError::format(path, format!("metadata: {e}")))?;
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| AppError::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| AppError::format(path, "shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(AppError::format(path, "trailing bytes after parameters"));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> AppResult<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Rebuilds the saved model exactly.
    pub fn to_model(&self) -> AppResult<Model> {
        let mut model = Model::new(self.meta.config.clone(), 0)?;
        self.restore_into(&mut model, true)?;
        Ok(model)
    }

    /// Copies saved arrays into `model` by name. Every model parameter must be
    /// present with a matching shape; with `strict`, the checkpoint may not
    /// carry extra arrays either (non-strict loading serves ablations that
    /// drop steps or adapters).
    pub fn restore_into(&self, model: &mut Model, strict: bool) -> AppResult<()> {
        let path = Path::new("<checkpoint>");
        let mut used = 0;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let Some((_, t)) = self.params.iter().find(|(n, _)| *n == name) else {
                return Err(AppError::format(path, format!("parameter `{name}` missing from checkpoint")));
            };
            model.store.assign(id, t.clone())?;
            used += 1;
        }
        if strict && used != self.params.len() {
            return Err(AppError::format(
                path,
                format!("checkpoint has {} arrays, model expects {used}", self.params.len()),
            ));
        }
        if used != self.params.len() {
            log::info!("ignored {} checkpoint arrays not used by this model", self.params.len() - used);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AppError::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
