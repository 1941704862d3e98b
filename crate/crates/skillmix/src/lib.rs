//! File formats, experiment protocols and the command-line interface on top
//! of [`skillmix_core`].
//!
//! * [`io`]: JSONL datasets, vocabulary files, atomic writes.
//! * [`checkpoint`]: versioned binary checkpoints.
//! * [`config`]: the TOML run configuration.
//! * [`experiment`]: dataset generation, pretraining, adaptation, evaluation.
//! * [`analysis`]: routing profiles and CSV/JSON reports.
//! * [`cli`]: the `skillmix` binary's subcommands.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use error::{AppError, AppResult};
