//! Simulator for resource-aware federated one-shot architecture search.
//!
//! The pipeline has three stages: federated training of a weight-sharing
//! supernet under communication and compute budgets ([`fedcore`]),
//! per-tier multi-objective search over the trained supernet
//! ([`search`]), and tier-aware federated fine-tuning of the selected
//! architectures ([`finetune`]). [`experiment`] wires the stages together
//! and writes run artifacts.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod fedcore;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod search;
pub mod space;
pub mod supernet;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use sampling::{Subspace, TierSpec};
pub use space::{CostTable, Path, SearchSpace, SpaceConfig};
pub use supernet::{Model, ParamKey, ParamMap, Supernet};
