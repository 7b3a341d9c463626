//! ChronoFormer: temporally biased hierarchical attention over binned
//! clinical event sequences, with masked-event pretraining.
//!
//! The crate is organized as:
//! - [`numeric`]: dense f64 tensors with reverse-mode differentiation
//! - [`events`]: event/bin/sequence data model, corpus IO, synthetic generator
//! - [`embeddings`]: concept + absolute-time + relative-delta + metadata embeddings
//! - [`attention`]: biased two-level attention with instrumented op counters
//! - [`model`]: the full network, configs, parameters, checkpoints
//! - [`pretrain`]: masked event modeling, reweighted estimator, training loop
//! - [`analysis`]: classification metrics, spectral analysis, corpus statistics
//! - [`cli`]: the `chronoformer` command-line interface

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod events;
pub mod model;
pub mod numeric;
pub mod pretrain;

pub use error::{Error, Result};
