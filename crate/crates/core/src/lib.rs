//! Split-learning QoS forecasting engine.
//!
//! The crate trains a multi-headed sequence-to-sequence throughput predictor
//! whose encoder halves live on different network entities: each worker runs
//! a private encoder over its own feature windows, only fixed-size context
//! vectors travel to the coordinator, and the coordinator merges them,
//! decodes a multi-step forecast, and drives the synchronized training
//! rounds (context collection, shared backward pass, per-entity weight
//! averaging, global encoder broadcast).
//!
//! Module map:
//! - [`tensor`], [`layers`], [`optim`], [`loss`], [`gradcheck`]: the numeric
//!   engine — dense/LSTM/BiLSTM layers with hand-written backward passes.
//! - [`model`]: encoder/decoder assembly, context merging, presets, and
//!   checkpointing.
//! - [`topology`]: entities, workers, roles, and timing validation.
//! - [`transport`]: protocol envelopes, the deterministic in-process bus,
//!   and the binary wire codec with a TCP bridge.
//! - [`data`]: synthetic tele-operated-driving workload, normalization, and
//!   windowing.
//! - [`protocol`]: the synchronized training rounds and weight averaging.
//! - [`privacy`]: input-reconstruction attack against published context
//!   vectors.
//! - [`eval`]: forecast metrics and baselines.
//! - [`config`]: run configuration files.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod topology;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::Tensor;
