//! Skill-routed cascaded reasoning encoder-decoder, `no_std` + `alloc`.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`tape`]: dense `f64` tensors and a define-by-run
//!   reverse-mode autodiff tape.
//! * [`params`]: named parameter storage grouped for freezing.
//! * [`nn`]: embeddings, multi-head attention, feed-forward, pre-norm
//!   Transformer layers and bottleneck adapters.
//! * [`encoder`]: representation stack, skill-specialised reasoning modules
//!   shared across depth, per-step skill routers with top-k sparse mixing, and
//!   residual stop gates.
//! * [`seq2seq`]: decoder, teacher-forcing loss, greedy generation and option
//!   scoring.
//! * [`corpus`]: seeded synthetic knowledge world, skill and downstream task
//!   generators, whitespace vocabulary.
//! * [`train`]: routing loss, Adam with global-norm clipping, freeze masks,
//!   pretraining and adaptation steps.
//!
//! File formats, experiments and the command-line surface live in the
//! `skillmix` companion crate.

#![no_std]

extern crate alloc;

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod grad_check;
pub mod math;
pub mod model;
pub mod nn;
pub mod params;
pub mod seq2seq;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, StopResidual};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
