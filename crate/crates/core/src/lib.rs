//! Character-level language modelling with three model families trained
//! under one pipeline:
//!
//! * an echo-state reservoir with a linear readout,
//! * a reservoir with an attention-enhanced readout (AERC), where a small
//!   network produces per-sample readout weights from the reservoir state,
//! * a compact decoder-only transformer.
//!
//! All trainable maps run on [`diffcore`], a small reverse-mode tensor
//! engine with Adam. [`trainer`] drives shard-wise training,
//! [`evalgen`] does closed-loop generation and n-gram overlap scoring and
//! [`bench`] measures wall-clock cost against trainable-parameter count.

pub mod bench;
pub mod cli;
pub mod corpus;
pub mod diffcore;
mod error;
pub mod evalgen;
pub mod model;
pub mod readout;
pub mod reservoir;
pub mod rng;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{Family, Model, ModelConfig};

/// Embedding width shared by every model family.
pub const EMBED_DIM: usize = 16;
/// Number of input characters per training window.
pub const SEQ_LEN: usize = 32;
