//! # dflsim
//!
//! A round-synchronous simulator for decentralized federated learning (DFL).
//!
//! Clients sit on a communication graph, train local models, and aggregate
//! their neighbors' updates peer-to-peer. The crate provides:
//!
//! - gradient-tracking aggregation (DSGT) and plain decentralized SGD (DSGD),
//! - a gradient purification defense that records, per neighbor, every
//!   aggregated tracking variable and cancels a malicious neighbor's entire
//!   history in a single round once detection latches,
//! - consistency- and similarity-based malicious-client detection,
//! - data-poisoning attacks (pixel backdoors, single-image injection,
//!   omniscient deviation, constant-vector probes),
//! - synthetic image data with iid and non-iid partitioners,
//! - an experiment CLI with deterministic, seed-reproducible CSV/JSONL output.
//!
//! The `book/` directory of the repository is an mdBook guide whose code
//! snippets compile and run as doc-tests of this crate.

pub mod attack;
pub mod config;
pub mod data;
pub mod detection;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod runner;
pub mod selfcheck;
pub mod topology;

mod book;

pub use error::{Error, Result};
pub use model::{Batch, ModelSpec, ParamVec};
