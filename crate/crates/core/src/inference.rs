//! Probability engine for KG-enhanced answering.
//!
//! Answering is two steps: retrieve one triple rooted at the query entity,
//! then answer conditioned on it. The retrieval distribution puts mass only on
//! triples whose subject is the query entity, in proportion to how likely the
//! model finds each triple's relation as the information it needs. Tuning
//! minimizes
//!
//! ```text
//! L = -(1/K) * sum_{z in H} ln[ P(a | q, z) * P(z | q) ]
//! ```
//!
//! over the personalized triple set `H`, split into a retrieval part and a
//! reasoning part. All logs are natural, so losses are in nats.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{normalize_label, KnowledgeGraph, KnowledgeTriple};
use crate::scoring::{
    parse_relation_list, render_reasoning, render_relation_extraction, render_retrieve, render_unretrieved,
    QueryId, RenderedPrompt, ScoringBackend,
};

/// Default probability substituted for personalized triples missing from the graph.
pub const DEFAULT_FLOOR: f64 = 1e-9;

/// Token budget for relation-list generation.
pub const EXTRACTION_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleSource {
    ModelExtracted,
    UserProvided,
}

/// Up to `K` triples linking the query entity to the answer entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedTripleSet {
    triples: Vec<KnowledgeTriple>,
    source: TripleSource,
    configured_k: usize,
}

impl PersonalizedTripleSet {
    /// Build from relation labels; duplicates collapse and the list is cut at `k`.
    pub fn from_relations<S: AsRef<str>>(
        subject: &str,
        object: &str,
        relations: &[S],
        k: usize,
        source: TripleSource,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        let mut triples: Vec<KnowledgeTriple> = Vec::new();
        for r in relations {
            if normalize_label(r.as_ref()).is_empty() {
                continue;
            }
            let z = KnowledgeTriple::new(subject, r.as_ref(), object)?;
            if !triples.contains(&z) {
                triples.push(z);
            }
        }
        triples.truncate(k);
        if triples.is_empty() {
            return Err(Error::ExtractionFailure("no usable relations".into()));
        }
        Ok(Self {
            triples,
            source,
            configured_k: k,
        })
    }

    pub fn triples(&self) -> &[KnowledgeTriple] {
        &self.triples
    }

    pub fn source(&self) -> TripleSource {
        self.source
    }

    pub fn effective_k(&self) -> usize {
        self.triples.len()
    }

    pub fn configured_k(&self) -> usize {
        self.configured_k
    }

    pub fn contains(&self, z: &KnowledgeTriple) -> bool {
        self.triples.contains(z)
    }

    pub fn subject(&self) -> &str {
        self.triples[0].subject()
    }
}

/// Uniform posterior over the personalized set.
pub fn posterior_q(z: &KnowledgeTriple, h: &PersonalizedTripleSet) -> f64 {
    if h.contains(z) {
        1.0 / h.effective_k() as f64
    } else {
        0.0
    }
}

#[derive(Default)]
struct ScoreCache {
    relation: RwLock<HashMap<(QueryId, String, String), f64>>,
    reasoning: RwLock<HashMap<(QueryId, Option<KnowledgeTriple>, String), f64>>,
}

/// Backend wrapper that memoizes log-probabilities and counts backend calls.
///
/// Relation and reasoning scores do not depend on the graph, so once a tuning
/// run has scored its candidates every later loss evaluation is cache-only.
pub struct Scorer<'a> {
    backend: &'a dyn ScoringBackend,
    cache: ScoreCache,
    calls: AtomicU64,
}

impl<'a> Scorer<'a> {
    pub fn new(backend: &'a dyn ScoringBackend) -> Self {
        Self {
            backend,
            cache: ScoreCache::default(),
            calls: AtomicU64::new(0),
        }
    }

    /// Number of requests that reached the backend.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn checked(&self, lp: f64) -> Result<f64> {
        if lp.is_nan() || lp > 1e-12 {
            return Err(Error::BackendUnavailable(format!("backend returned invalid log-probability {lp}")));
        }
        Ok(lp.min(0.0))
    }

    /// `ln P(relation | retrieve-template(query, subject))`.
    pub fn relation_logprob(&self, query: &str, subject: &str, relation: &str) -> Result<f64> {
        let key = (QueryId::of(query), normalize_label(subject), normalize_label(relation));
        if let Some(&lp) = self.cache.relation.read().unwrap().get(&key) {
            return Ok(lp);
        }
        let prompt = render_retrieve(query, subject)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let lp = self.checked(self.backend.score_continuation(&prompt, &key.2)?)?;
        self.cache.relation.write().unwrap().insert(key, lp);
        Ok(lp)
    }

    /// `ln P(answer | reasoning-template(query, triple))`; `None` scores the
    /// query without any retrieved fact.
    pub fn answer_logprob(&self, query: &str, triple: Option<&KnowledgeTriple>, answer: &str) -> Result<f64> {
        let key = (QueryId::of(query), triple.cloned(), answer.to_owned());
        if let Some(&lp) = self.cache.reasoning.read().unwrap().get(&key) {
            return Ok(lp);
        }
        if answer.is_empty() {
            tracing::warn!("scoring an empty answer; its probability is 1");
        }
        let prompt = match triple {
            Some(z) => render_reasoning(query, z),
            None => render_unretrieved(query),
        };
        self.calls.fetch_add(1, Ordering::Relaxed);
        let lp = self.checked(self.backend.score_continuation(&prompt, answer)?)?;
        self.cache.reasoning.write().unwrap().insert(key, lp);
        Ok(lp)
    }

    pub fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.backend.generate(prompt, max_tokens)
    }
}

/// Build the personalized triple set from user-supplied relations or, when
/// none are given, from the model's relation extraction.
pub fn extract_personalized_triples(
    scorer: &Scorer<'_>,
    query: &str,
    answer: &str,
    subject: &str,
    object: &str,
    k: usize,
    user_relations: Option<&[String]>,
) -> Result<PersonalizedTripleSet> {
    if k < 1 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    match user_relations {
        Some(relations) => {
            PersonalizedTripleSet::from_relations(subject, object, relations, k, TripleSource::UserProvided)
                .map_err(|e| match e {
                    Error::ExtractionFailure(_) => {
                        Error::ExtractionFailure("user supplied no non-empty relations".into())
                    }
                    other => other,
                })
        }
        None => {
            let prompt = render_relation_extraction(query, answer, subject, object, k)?;
            let raw = scorer.generate(&prompt, EXTRACTION_MAX_TOKENS)?;
            let relations = parse_relation_list(&raw, k)?;
            PersonalizedTripleSet::from_relations(subject, object, &relations, k, TripleSource::ModelExtracted)
        }
    }
}

/// Normalized retrieval probabilities over the triples rooted at the query entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDistribution {
    pub query: String,
    pub subject: String,
    #[serde(with = "crate::kg::triple_probabilities")]
    entries: BTreeMap<KnowledgeTriple, f64>,
    #[serde(skip)]
    log_entries: BTreeMap<KnowledgeTriple, f64>,
}

impl RetrievalDistribution {
    /// Normalize unnormalized log-weights with a max shift so that very
    /// unlikely relation labels cannot underflow the whole distribution.
    pub fn from_log_weights(
        query: &str,
        subject: &str,
        weights: impl IntoIterator<Item = (KnowledgeTriple, f64)>,
    ) -> Self {
        let weights: Vec<(KnowledgeTriple, f64)> = weights.into_iter().collect();
        let max = weights.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + weights.iter().map(|(_, w)| (w - max).exp()).sum::<f64>().ln();
        let mut entries = BTreeMap::new();
        let mut log_entries = BTreeMap::new();
        for (z, w) in weights {
            let lp = w - log_norm;
            entries.insert(z.clone(), lp.exp());
            log_entries.insert(z, lp);
        }
        Self {
            query: query.to_owned(),
            subject: normalize_label(subject),
            entries,
            log_entries,
        }
    }

    pub fn probability(&self, z: &KnowledgeTriple) -> f64 {
        self.entries.get(z).copied().unwrap_or(0.0)
    }

    /// `None` outside the support.
    pub fn log_probability(&self, z: &KnowledgeTriple) -> Option<f64> {
        self.log_entries
            .get(z)
            .copied()
            .or_else(|| self.entries.get(z).map(|p| p.ln()))
    }

    pub fn entries(&self) -> &BTreeMap<KnowledgeTriple, f64> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Most probable triple; exact ties go to the lexicographically smallest.
    pub fn argmax(&self) -> Option<&KnowledgeTriple> {
        let mut best: Option<(&KnowledgeTriple, f64)> = None;
        for (z, &p) in &self.entries {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((z, p));
            }
        }
        best.map(|(z, _)| z)
    }
}

/// Retrieval distribution over an explicit candidate set (all rooted at `subject`).
pub fn retrieval_over<'t>(
    candidates: impl IntoIterator<Item = &'t KnowledgeTriple>,
    query: &str,
    subject: &str,
    scorer: &Scorer<'_>,
) -> Result<RetrievalDistribution> {
    let mut weights = Vec::new();
    for z in candidates {
        weights.push((z.clone(), scorer.relation_logprob(query, subject, z.relation())?));
    }
    Ok(RetrievalDistribution::from_log_weights(query, subject, weights))
}

pub fn retrieval_distribution(
    graph: &KnowledgeGraph,
    query: &str,
    subject: &str,
    scorer: &Scorer<'_>,
) -> Result<RetrievalDistribution> {
    let gq = graph.triples_from_subject(subject);
    retrieval_over(gq.iter(), query, subject, scorer)
}

pub fn reasoning_probability(
    query: &str,
    triple: &KnowledgeTriple,
    answer: &str,
    scorer: &Scorer<'_>,
) -> Result<f64> {
    Ok(scorer.answer_logprob(query, Some(triple), answer)?.exp())
}

/// How personalized triples outside the retrieval support enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "floor")]
pub enum LossMode {
    /// Substitute this retrieval probability and flag the term.
    Floor(f64),
    /// Sum only over personalized triples present in the graph; infinite when
    /// none are.
    Intersect,
}

impl Default for LossMode {
    fn default() -> Self {
        LossMode::Floor(DEFAULT_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleLoss {
    pub triple: KnowledgeTriple,
    pub retrieval_probability: f64,
    pub reasoning_probability: f64,
    pub floored: bool,
    /// False when intersect mode leaves the term out.
    pub counted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retrieve_loss: f64,
    pub reasoning_loss: f64,
    pub total: f64,
    pub per_triple: Vec<TripleLoss>,
}

/// Loss of `h` against a precomputed retrieval distribution.
pub fn loss_against(
    distribution: &RetrievalDistribution,
    query: &str,
    answer: &str,
    h: &PersonalizedTripleSet,
    scorer: &Scorer<'_>,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let k = h.effective_k() as f64;
    let mut retrieve_sum = 0.0;
    let mut reasoning_sum = 0.0;
    let mut counted_any = false;
    let mut per_triple = Vec::with_capacity(h.effective_k());
    for z in h.triples() {
        let reasoning_lp = scorer.answer_logprob(query, Some(z), answer)?;
        let (retrieval_lp, floored, counted) = match (distribution.log_probability(z), mode) {
            (Some(lp), _) => (lp, false, true),
            (None, LossMode::Floor(floor)) => (floor.ln(), true, true),
            (None, LossMode::Intersect) => (f64::NEG_INFINITY, false, false),
        };
        if counted {
            counted_any = true;
            retrieve_sum -= retrieval_lp;
            reasoning_sum -= reasoning_lp;
        }
        per_triple.push(TripleLoss {
            triple: z.clone(),
            retrieval_probability: retrieval_lp.exp(),
            reasoning_probability: reasoning_lp.exp(),
            floored,
            counted,
        });
    }
    let (retrieve_loss, reasoning_loss) = if counted_any {
        (retrieve_sum / k, reasoning_sum / k)
    } else {
        (f64::INFINITY, 0.0)
    };
    Ok(LossBreakdown {
        retrieve_loss,
        reasoning_loss,
        total: retrieve_loss + reasoning_loss,
        per_triple,
    })
}

/// Combined retrieval + reasoning loss of `h` on the current graph.
pub fn total_loss(
    graph: &KnowledgeGraph,
    query: &str,
    answer: &str,
    h: &PersonalizedTripleSet,
    scorer: &Scorer<'_>,
    mode: LossMode,
) -> Result<LossBreakdown> {
    if let LossMode::Floor(floor) = mode {
        if !(floor > 0.0 && floor < 1.0) {
            return Err(Error::Validation(format!("probability floor {floor} outside (0, 1)")));
        }
    }
    let distribution = retrieval_distribution(graph, query, h.subject(), scorer)?;
    loss_against(&distribution, query, answer, h, scorer, mode)
}

/// The retrieval KL term computed two ways: directly against the uniform
/// posterior, and as the closed form that drops the posterior's entropy.
/// They differ by exactly `-ln K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlRetrievalLoss {
    pub direct_kl: f64,
    pub closed_form: f64,
}

pub fn kl_retrieval_loss(
    graph: &KnowledgeGraph,
    query: &str,
    h: &PersonalizedTripleSet,
    scorer: &Scorer<'_>,
) -> Result<KlRetrievalLoss> {
    let distribution = retrieval_distribution(graph, query, h.subject(), scorer)?;
    let k = h.effective_k() as f64;
    let mut direct_kl = 0.0;
    let mut closed_form = 0.0;
    for z in h.triples() {
        let lp = distribution.log_probability(z).ok_or_else(|| {
            Error::Validation(format!("{z} is not in the graph; the KL term is undefined"))
        })?;
        let q = posterior_q(z, h);
        direct_kl += q * (q.ln() - lp);
        closed_form -= lp / k;
    }
    Ok(KlRetrievalLoss {
        direct_kl,
        closed_form,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    pub retrieved: Option<KnowledgeTriple>,
    pub distribution: RetrievalDistribution,
}

/// Serve a query: retrieve the most probable triple, then generate from it.
pub fn answer_query(
    graph: &KnowledgeGraph,
    query: &str,
    subject: &str,
    scorer: &Scorer<'_>,
    max_tokens: usize,
) -> Result<Answer> {
    let distribution = retrieval_distribution(graph, query, subject, scorer)?;
    let retrieved = distribution.argmax().cloned();
    let prompt = match &retrieved {
        Some(z) => render_reasoning(query, z),
        None => render_unretrieved(query),
    };
    let answer = scorer.generate(&prompt, max_tokens)?;
    Ok(Answer {
        answer,
        retrieved,
        distribution,
    })
}

/// `P(a | q) = sum_z P(a | q, z) P(z | q)` over the triples rooted at `subject`;
/// with nothing to retrieve, the unconditioned answer probability.
pub fn marginal_answer_probability(
    graph: &KnowledgeGraph,
    query: &str,
    subject: &str,
    answer: &str,
    scorer: &Scorer<'_>,
) -> Result<f64> {
    let distribution = retrieval_distribution(graph, query, subject, scorer)?;
    marginal_over(&distribution, query, answer, scorer)
}

pub(crate) fn marginal_over(
    distribution: &RetrievalDistribution,
    query: &str,
    answer: &str,
    scorer: &Scorer<'_>,
) -> Result<f64> {
    if distribution.is_empty() {
        return Ok(scorer.answer_logprob(query, None, answer)?.exp());
    }
    let mut total = 0.0;
    for (z, &p) in distribution.entries() {
        total += p * scorer.answer_logprob(query, Some(z), answer)?.exp();
    }
    Ok(total)
}
