//! Named parameter storage.
//!
//! Every array lives in exactly one slot of a [`ParamStore`]; layers hold
//! [`ParamId`]s. Reusing an id at several places in a forward pass is how
//! cross-depth sharing works: the tape accumulates all contributions into the
//! one slot's gradient.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Module groups that freezing acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embeddings,
    Representation,
    ReasoningModules,
    Adapters,
    Routers,
    StopGates,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Embeddings,
        ParamGroup::Representation,
        ParamGroup::ReasoningModules,
        ParamGroup::Adapters,
        ParamGroup::Routers,
        ParamGroup::StopGates,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Representation => "representation",
            ParamGroup::ReasoningModules => "reasoning_modules",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Routers => "routers",
            ParamGroup::StopGates => "stop_gates",
            ParamGroup::Decoder => "decoder",
        }
    }

    /// Accepts the canonical names plus the short CLI aliases (`rm`, `rep`, ...).
    pub fn parse(s: &str) -> Result<ParamGroup> {
        Ok(match s {
            "embeddings" | "embedding" | "emb" => ParamGroup::Embeddings,
            "representation" | "rep" => ParamGroup::Representation,
            "reasoning_modules" | "rm" | "rms" => ParamGroup::ReasoningModules,
            "adapters" | "adapter" => ParamGroup::Adapters,
            "routers" | "router" => ParamGroup::Routers,
            "stop_gates" | "gates" | "gate" => ParamGroup::StopGates,
            "decoder" | "dec" => ParamGroup::Decoder,
            other => return Err(Error::Validation(alloc::format!("unknown module group `{other}`"))),
        })
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            tensor,
            group,
            trainable: true,
        });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup) -> ParamId {
        self.register(name, Tensor::zeros(shape), group)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup) -> ParamId {
        self.register(name, Tensor::full(shape, 1.0), group)
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = normal.sample(rng);
        }
        self.register(name, t, group)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Replaces a parameter's values, checking the shape.
    pub fn assign(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }
}
