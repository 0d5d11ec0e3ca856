//! Mutation operators: an HTTP chat-completions client and deterministic
//! stub mutators for offline runs.

pub mod diff;
pub mod llm;
pub mod stub;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptBundle;
use crate::tasks::circle::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    #[default]
    Diff,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationOutcome {
    pub content: Option<String>,
    pub raw_response: String,
    pub parse_ok: bool,
    pub failure_reason: Option<String>,
}

impl MutationOutcome {
    pub fn success(content: String, raw_response: String) -> Self {
        Self { content: Some(content), raw_response, parse_ok: true, failure_reason: None }
    }

    pub fn failure(raw_response: String, reason: impl Into<String>) -> Self {
        Self { content: None, raw_response, parse_ok: false, failure_reason: Some(reason.into()) }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MutatorError {
    #[error("mutation endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("parent content cannot be parsed: {0}")]
    UnparseableParent(String),
    #[error("mutator misconfigured: {0}")]
    Misconfigured(String),
}

impl MutatorError {
    /// Faults that should stop the run rather than score 0.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, MutatorError::UnparseableParent(_))
    }
}

pub struct MutationRequest<'a> {
    pub prompt: &'a PromptBundle,
    pub parent_content: &'a str,
    pub seed: u64,
    pub fence_language: &'a str,
    pub mode: EditMode,
}

pub trait Mutator: Send + Sync {
    fn tag(&self) -> &str;
    fn mutate(&self, request: &MutationRequest<'_>) -> Result<MutationOutcome, MutatorError>;
}

/// Task facts the stubs need.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MutatorHints {
    pub bounds: Option<Vec<(f64, f64)>>,
    pub domain: Option<Domain>,
    pub n_vars: Option<usize>,
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutatorConfig {
    Llm(llm::LlmConfig),
    NumericJitter(stub::JitterParams),
    CircleRefine(stub::CircleRefineParams),
    ExprSubtree(stub::SubtreeParams),
}

impl MutatorConfig {
    pub fn is_stub(&self) -> bool {
        !matches!(self, MutatorConfig::Llm(_))
    }

    /// Edit mode forced by the config, if any.
    pub fn mode_override(&self) -> Option<EditMode> {
        match self {
            MutatorConfig::Llm(c) => c.mode,
            _ => None,
        }
    }

    pub fn build(&self, hints: &MutatorHints) -> Result<Arc<dyn Mutator>, MutatorError> {
        Ok(match self {
            MutatorConfig::Llm(c) => Arc::new(llm::LlmMutator::new(c.clone())?),
            MutatorConfig::NumericJitter(p) => Arc::new(stub::NumericJitter::new(p.clone(), hints.bounds.clone())?),
            MutatorConfig::CircleRefine(p) => {
                Arc::new(stub::CircleRefine::new(p.clone(), hints.domain.unwrap_or(Domain::UnitSquare))?)
            }
            MutatorConfig::ExprSubtree(p) => Arc::new(stub::ExprSubtree::new(
                p.clone(),
                hints.n_vars.unwrap_or(1),
                hints.max_depth.unwrap_or(crate::tasks::expr::DEFAULT_MAX_DEPTH),
            )?),
        })
    }

    /// Copy safe to write to disk: key material replaced by a marker.
    pub fn redacted(&self) -> Self {
        match self {
            MutatorConfig::Llm(c) => MutatorConfig::Llm(c.redacted()),
            other => other.clone(),
        }
    }
}
