//! Language-model scoring contract.
//!
//! The engine never runs a model itself. It needs two things from one: the
//! log-probability of a continuation given a prompt, and a short generation.
//! [`SyntheticBackend`] answers both from lookup tables and stands in for a
//! model in tests and demos; [`RemoteBackend`] talks to a completion endpoint
//! that can echo per-token log-probabilities.

mod synthetic;
mod templates;

#[cfg(feature = "remote")]
mod remote;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::kg::KnowledgeTriple;

pub use synthetic::{
    ExtractionEntry, FallbackScoreEntry, ReasoningScoreEntry, RelationScoreEntry, SyntheticBackend,
    SyntheticFixture,
};
pub use templates::{
    parse_relation_list, render_reasoning, render_relation_extraction, render_retrieve, render_unretrieved,
    RELATION_SEPARATOR,
};

#[cfg(feature = "remote")]
pub use remote::{RemoteBackend, RemoteConfig};

/// Stable identifier of a raw query string: the first 16 hex digits of its SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryId(String);

impl QueryId {
    pub fn of(query: &str) -> Self {
        let digest = Sha256::digest(query.as_bytes());
        QueryId(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Retrieve,
    Reasoning,
    RelationExtraction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub text: String,
    pub query_id: QueryId,
    /// The fact placed in a reasoning prompt, if any.
    pub triple: Option<KnowledgeTriple>,
}

pub trait ScoringBackend: Send + Sync {
    /// Log-probability (nats, `<= 0`) of `continuation` following `prompt`.
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<f64>;

    fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> Result<String>;
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for std::sync::Arc<T> {
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<f64> {
        (**self).score_continuation(prompt, continuation)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> Result<String> {
        (**self).generate(prompt, max_tokens)
    }
}

impl<T: ScoringBackend + ?Sized> ScoringBackend for &T {
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<f64> {
        (**self).score_continuation(prompt, continuation)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> Result<String> {
        (**self).generate(prompt, max_tokens)
    }
}
