use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeTriple;

use super::{QueryId, RenderedPrompt, ScoringBackend, TemplateId, RELATION_SEPARATOR};

/// Lookup tables standing in for a language model, as stored on disk.
///
/// Entries are keyed by raw query text; the backend hashes them to
/// [`QueryId`]s when it is built.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFixture {
    pub default_score: f64,
    #[serde(default)]
    pub relation_scores: Vec<RelationScoreEntry>,
    #[serde(default)]
    pub reasoning_scores: Vec<ReasoningScoreEntry>,
    /// Answer probabilities when no triple is retrieved.
    #[serde(default)]
    pub fallback_scores: Vec<FallbackScoreEntry>,
    #[serde(default)]
    pub extraction_lists: Vec<ExtractionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScoreEntry {
    pub query: String,
    pub relation: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningScoreEntry {
    pub query: String,
    pub triple: KnowledgeTriple,
    pub answer: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackScoreEntry {
    pub query: String,
    pub answer: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionEntry {
    pub query: String,
    pub relations: Vec<String>,
}

impl SyntheticFixture {
    pub fn new(default_score: f64) -> Self {
        Self {
            default_score,
            ..Self::default()
        }
    }

    pub fn relation(&mut self, query: &str, relation: &str, probability: f64) -> &mut Self {
        self.relation_scores.push(RelationScoreEntry {
            query: query.to_owned(),
            relation: relation.to_owned(),
            probability,
        });
        self
    }

    pub fn reasoning(&mut self, query: &str, triple: &KnowledgeTriple, answer: &str, probability: f64) -> &mut Self {
        self.reasoning_scores.push(ReasoningScoreEntry {
            query: query.to_owned(),
            triple: triple.clone(),
            answer: answer.to_owned(),
            probability,
        });
        self
    }

    pub fn fallback(&mut self, query: &str, answer: &str, probability: f64) -> &mut Self {
        self.fallback_scores.push(FallbackScoreEntry {
            query: query.to_owned(),
            answer: answer.to_owned(),
            probability,
        });
        self
    }

    pub fn extraction(&mut self, query: &str, relations: &[&str]) -> &mut Self {
        self.extraction_lists.push(ExtractionEntry {
            query: query.to_owned(),
            relations: relations.iter().map(|r| r.to_string()).collect(),
        });
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} probability {p} is outside (0, 1]")))
    }
}

fn argmax_label(scores: &BTreeMap<String, f64>) -> Option<&str> {
    // BTreeMap iterates in label order, so the first maximum wins ties
    let mut best: Option<(&str, f64)> = None;
    for (label, &p) in scores {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((label, p));
        }
    }
    best.map(|(label, _)| label)
}

/// Deterministic table-driven backend. Read-only after construction.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    default_log: f64,
    relations: HashMap<QueryId, BTreeMap<String, f64>>,
    reasoning: HashMap<(QueryId, KnowledgeTriple), BTreeMap<String, f64>>,
    fallback: HashMap<QueryId, BTreeMap<String, f64>>,
    extraction: HashMap<QueryId, Vec<String>>,
}

impl SyntheticBackend {
    pub fn new(fixture: &SyntheticFixture) -> Result<Self> {
        check_probability(fixture.default_score, "default")?;
        let mut relations: HashMap<QueryId, BTreeMap<String, f64>> = HashMap::new();
        for e in &fixture.relation_scores {
            check_probability(e.probability, "relation score")?;
            relations
                .entry(QueryId::of(&e.query))
                .or_default()
                .insert(crate::kg::normalize_label(&e.relation), e.probability);
        }
        let mut reasoning: HashMap<(QueryId, KnowledgeTriple), BTreeMap<String, f64>> = HashMap::new();
        for e in &fixture.reasoning_scores {
            check_probability(e.probability, "reasoning score")?;
            reasoning
                .entry((QueryId::of(&e.query), e.triple.clone()))
                .or_default()
                .insert(e.answer.clone(), e.probability);
        }
        let mut fallback: HashMap<QueryId, BTreeMap<String, f64>> = HashMap::new();
        for e in &fixture.fallback_scores {
            check_probability(e.probability, "fallback score")?;
            fallback
                .entry(QueryId::of(&e.query))
                .or_default()
                .insert(e.answer.clone(), e.probability);
        }
        let mut extraction = HashMap::new();
        for e in &fixture.extraction_lists {
            if e.relations.is_empty() {
                return Err(Error::Validation(format!("empty extraction list for query {:?}", e.query)));
            }
            extraction.insert(QueryId::of(&e.query), e.relations.clone());
        }
        Ok(Self {
            default_log: fixture.default_score.ln(),
            relations,
            reasoning,
            fallback,
            extraction,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(&SyntheticFixture::load(path)?)
    }

    fn answers_for(&self, prompt: &RenderedPrompt) -> Option<&BTreeMap<String, f64>> {
        match &prompt.triple {
            Some(z) => self.reasoning.get(&(prompt.query_id.clone(), z.clone())),
            None => self.fallback.get(&prompt.query_id),
        }
    }
}

impl ScoringBackend for SyntheticBackend {
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let table = match prompt.template {
            TemplateId::Retrieve => self.relations.get(&prompt.query_id),
            TemplateId::Reasoning => self.answers_for(prompt),
            TemplateId::RelationExtraction => None,
        };
        let key = match prompt.template {
            TemplateId::Retrieve => crate::kg::normalize_label(continuation),
            _ => continuation.to_owned(),
        };
        Ok(table
            .and_then(|t| t.get(&key))
            .map_or(self.default_log, |p| p.ln()))
    }

    fn generate(&self, prompt: &RenderedPrompt, _max_tokens: usize) -> Result<String> {
        let text = match prompt.template {
            TemplateId::RelationExtraction => self
                .extraction
                .get(&prompt.query_id)
                .map(|list| list.join(&format!(" {RELATION_SEPARATOR} ")))
                .unwrap_or_default(),
            TemplateId::Retrieve => self
                .relations
                .get(&prompt.query_id)
                .and_then(argmax_label)
                .unwrap_or_default()
                .to_owned(),
            TemplateId::Reasoning => self
                .answers_for(prompt)
                .or_else(|| self.fallback.get(&prompt.query_id))
                .and_then(argmax_label)
                .unwrap_or_default()
                .to_owned(),
        };
        Ok(text)
    }
}
