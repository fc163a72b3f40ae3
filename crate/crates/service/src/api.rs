//! Request and response bodies. Field names are part of the public contract.

use kgtune::inference::RetrievalDistribution;
use kgtune::kg::JournalEntry;
use kgtune::optimizer::{LossModeKind, TuningConfig, TuningReport};
use kgtune::KnowledgeTriple;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub sessions: usize,
}

/// Where a new session's graph comes from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GraphSource {
    #[default]
    Empty,
    /// A tab-separated triple file readable by the server.
    File { path: String },
    /// Triples in the request itself, as a list or as tab-separated text.
    Import {
        #[serde(default)]
        triples: Vec<KnowledgeTriple>,
        #[serde(default)]
        tsv: Option<String>,
    },
}

/// Overrides for the server's default tuning configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningOverrides {
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub floor: Option<f64>,
    pub loss_mode: Option<LossModeKind>,
    pub protect_prior_feedback: Option<bool>,
}

impl TuningOverrides {
    pub fn apply(&self, base: &TuningConfig) -> TuningConfig {
        TuningConfig {
            k: self.k.unwrap_or(base.k),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            floor: self.floor.unwrap_or(base.floor),
            loss_mode: self.loss_mode.unwrap_or(base.loss_mode),
            protect_prior_feedback: self.protect_prior_feedback.unwrap_or(base.protect_prior_feedback),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub config: TuningOverrides,
    #[serde(default)]
    pub graph: GraphSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub triples: usize,
    pub config: TuningConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    /// Query entity.
    pub subject: String,
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    pub interaction_id: String,
    pub answer: String,
    pub retrieved: Option<KnowledgeTriple>,
    pub distribution: RetrievalDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub interaction_id: String,
    /// The answer the user wanted.
    pub answer: String,
    /// Answer entity.
    pub object: String,
    /// Relations linking the query entity to the answer entity; extracted by
    /// the model when absent.
    #[serde(default)]
    pub relations: Option<Vec<String>>,
}

/// Outcome of a tuning run, with the journal entries its commit produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackResult {
    pub interaction_id: String,
    pub report: TuningReport,
    pub journal: Vec<JournalEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FeedbackResponse {
    Completed(FeedbackResult),
    /// Still running; poll `GET /v1/sessions/{id}/feedback/{job_id}`.
    InProgress { job_id: String },
    Failed { error: ErrorBody },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphResponse {
    pub triples: Vec<KnowledgeTriple>,
    pub total: usize,
    pub last_seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalResponse {
    pub entries: Vec<JournalEntry>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphQuery {
    pub subject: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JournalQuery {
    pub since: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub triples: usize,
    pub config: TuningConfig,
    pub interactions: usize,
    /// Milliseconds since the Unix epoch.
    pub created_ms: u64,
    pub last_active_ms: u64,
}
