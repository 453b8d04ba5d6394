//! Multi-agent transformer for cooperative multi-agent reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation over `f64` tensors.
//! - [`nn`]: named parameter storage, linear layers and initialisation.
//! - [`transformer`]: masked attention, encoder and decoder blocks.
//! - [`model`]: the encoder-decoder policy with autoregressive sampling,
//!   teacher-forced evaluation and the decentralised-actor variant.
//! - [`envs`]: small cooperative Markov games.
//! - [`training`]: rollout buffer, GAE, the two losses, Adam and the
//!   on-policy iteration.
//! - [`oracle`]: exact tabular values, multi-agent advantages and the
//!   advantage decomposition check.
//! - [`config`], [`checkpoint`], [`cli`]: run configuration, persistence
//!   and the command implementations behind the `mat` binary.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod envs;
mod error;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
