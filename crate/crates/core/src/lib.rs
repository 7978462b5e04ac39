//! Deep graph prompt tuning on frozen graph transformers.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine, [`graph`] holds samples, encodings, batching and dataset
//! generators, [`models`] the transformer and message-passing backbones,
//! [`prompt`] the graph prompt token, per-layer prefixes and virtual prompt
//! nodes, [`training`] the optimiser, losses, metrics and cross-validation
//! loop, and [`cli`] the config-driven experiment runner.

pub mod tensor;
pub mod cli;
pub mod graph;
pub mod models;
pub mod prompt;
pub mod rng;
pub mod training;
