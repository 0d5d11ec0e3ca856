//! Quality-diversity evolutionary search: a lineage store of scored
//! solutions, NSGA-II selection over reward and embedding diversity,
//! lineage-aware prompts, pluggable mutators and verifiable task rewards.

pub mod config;
pub mod diversity;
pub mod engine;
pub mod grpo;
pub mod model;
pub mod mutators;
pub mod persistence;
pub mod prompting;
pub mod selection;
pub mod sr_datasets;
pub mod tasks;
pub mod transport;
