//! Desk-scale federated-learning simulator with attack-tolerant aggregation.
//!
//! The crate is organized around flat parameter vectors ([`params`]), a
//! critical-parameter similarity measure ([`similarity`]), a small MLP
//! trainer ([`model`]), synthetic non-IID data with poisoning transforms
//! ([`data`]), a pluggable aggregation layer ([`aggregators`]), a round-based
//! orchestrator ([`simulation`]), and an importance-rank-change analysis
//! tool ([`analysis`]).

pub mod aggregators;
pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod similarity;
pub mod simulation;

pub use error::{Error, Result};
pub use params::{CriticalSets, ImportanceVector, Layout, ParamVector, RankMap};
