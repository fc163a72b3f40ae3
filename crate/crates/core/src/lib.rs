//! Personalizing a language model's answers by editing the knowledge graph it
//! retrieves from, instead of its weights.
//!
//! The pieces, bottom up:
//!
//! * [`kg`] stores triples with an edit journal.
//! * [`scoring`] talks to a language model (or a deterministic stand-in) and
//!   returns log-probabilities of continuations.
//! * [`inference`] turns those scores into retrieval distributions, answer
//!   probabilities and tuning losses.
//! * [`optimizer`] edits the graph until the loss for one piece of feedback
//!   drops below a threshold.
//! * [`eval`] replays a CounterFact-style dataset through the whole loop.

pub mod config;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod inference;
pub mod kg;
pub mod optimizer;
pub mod scoring;

pub use config::Settings;
pub use error::{Error, Result};
pub use eval::{run_online, CounterFactCase, EvalOptions, EvalReport};
pub use inference::{LossMode, PersonalizedTripleSet, RetrievalDistribution, Scorer};
pub use kg::{EditOp, KnowledgeGraph, KnowledgeTriple};
pub use optimizer::{greedy_tune, tune, TuneRequest, TuningConfig, TuningReport};
pub use scoring::{ScoringBackend, SyntheticBackend, SyntheticFixture};
