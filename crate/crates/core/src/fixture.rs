//! Synthetic backends and seed graphs built from a case list.
//!
//! For every case the seed graph holds the fact being overwritten,
//! `(subject, relation, target_true)`, and one unrelated distractor. The score
//! tables make the personalized triple `(subject, relation, target_new)`
//! strongly favor the new target and the conflicting triple strongly favor the
//! old one, so a tuning run that adds the former and removes the latter flips
//! the answer ranking while leaving it unflipped otherwise.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::CounterFactCase;
use crate::kg::KnowledgeTriple;
use crate::scoring::SyntheticFixture;

/// Relation of the per-case distractor triple.
pub const DISTRACTOR_RELATION: &str = "related to";

/// Score tables for one case, applied to its query and every paraphrase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureProfile {
    pub default_score: f64,
    /// Retrieval score of the case's relation (shared by the personalized and
    /// the conflicting triple).
    pub relation: f64,
    pub distractor_relation: f64,
    pub personalized_new: f64,
    pub personalized_true: f64,
    pub conflicting_new: f64,
    pub conflicting_true: f64,
    pub distractor_new: f64,
    pub distractor_true: f64,
    /// Answer scores with nothing retrieved.
    pub fallback_new: f64,
    pub fallback_true: f64,
}

impl Default for FixtureProfile {
    fn default() -> Self {
        Self {
            default_score: 0.01,
            relation: 0.4,
            distractor_relation: 0.2,
            personalized_new: 0.95,
            personalized_true: 0.02,
            conflicting_new: 0.05,
            conflicting_true: 0.9,
            distractor_new: 0.08,
            distractor_true: 0.3,
            fallback_new: 0.01,
            fallback_true: 0.6,
        }
    }
}

/// The three triples a case's fixture revolves around.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseTriples {
    pub personalized: KnowledgeTriple,
    pub conflicting: KnowledgeTriple,
    pub distractor: KnowledgeTriple,
}

impl CaseTriples {
    pub fn of(case: &CounterFactCase) -> Result<Self> {
        let relation = case.relation_label();
        Ok(Self {
            personalized: KnowledgeTriple::new(&case.subject, &relation, &case.target_new)?,
            conflicting: KnowledgeTriple::new(&case.subject, &relation, &case.target_true)?,
            distractor: KnowledgeTriple::new(
                &case.subject,
                DISTRACTOR_RELATION,
                &format!("context-{}", case.case_id),
            )?,
        })
    }
}

/// Score tables plus the seed triples they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFixture {
    pub fixture: SyntheticFixture,
    pub seed_triples: Vec<KnowledgeTriple>,
}

pub fn generate_fixture(cases: &[CounterFactCase], profile: &FixtureProfile) -> Result<GeneratedFixture> {
    let mut fixture = SyntheticFixture::new(profile.default_score);
    let mut seed_triples = Vec::with_capacity(cases.len() * 2);
    for case in cases {
        let triples = CaseTriples::of(case)?;
        let relation = case.relation_label();
        let query = case.query();
        fixture.extraction(&query, &[relation.as_str()]);
        for prompt in std::iter::once(&query).chain(&case.generation_prompts) {
            fixture
                .relation(prompt, &relation, profile.relation)
                .relation(prompt, DISTRACTOR_RELATION, profile.distractor_relation)
                .reasoning(prompt, &triples.personalized, &case.target_new, profile.personalized_new)
                .reasoning(prompt, &triples.personalized, &case.target_true, profile.personalized_true)
                .reasoning(prompt, &triples.conflicting, &case.target_new, profile.conflicting_new)
                .reasoning(prompt, &triples.conflicting, &case.target_true, profile.conflicting_true)
                .reasoning(prompt, &triples.distractor, &case.target_new, profile.distractor_new)
                .reasoning(prompt, &triples.distractor, &case.target_true, profile.distractor_true)
                .fallback(prompt, &case.target_new, profile.fallback_new)
                .fallback(prompt, &case.target_true, profile.fallback_true);
        }
        seed_triples.push(triples.conflicting);
        seed_triples.push(triples.distractor);
    }
    Ok(GeneratedFixture { fixture, seed_triples })
}

const TEMPLATES: &[(&str, &str, &str)] = &[
    ("{} works in the field of ", "P101(field of work)", "The field that {} is associated with is"),
    ("{} maintains diplomatic relations with ", "P530(diplomatic relation)", "Diplomatic relations are established between {} and"),
    ("{} is a citizen of ", "P27(country of citizenship)", "{} holds citizenship of"),
    ("The native language of {} is ", "P103(native language)", "{} grew up speaking"),
    ("{} was born in ", "P19(place of birth)", "The birthplace of {} is"),
];

const OBJECTS: &[&str] = &[
    "logic", "physics", "Malaysia", "Umboria", "French", "Dutch", "Paris", "Vienna", "chemistry", "Norway",
    "Peru", "Latin", "Kyoto", "botany", "Chile",
];

/// `n` CounterFact-format cases with distinct subjects and one paraphrase each.
pub fn synthetic_cases(n: usize, seed: u64) -> Vec<CounterFactCase> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (template, relation_id, paraphrase) = TEMPLATES[i % TEMPLATES.len()];
            let subject = format!("Entity {i}");
            let t = rng.random_range(0..OBJECTS.len());
            let offset = rng.random_range(1..OBJECTS.len());
            CounterFactCase {
                case_id: i as u64,
                prompt_template: template.to_owned(),
                relation_id: relation_id.to_owned(),
                target_true: OBJECTS[t].to_owned(),
                target_new: OBJECTS[(t + offset) % OBJECTS.len()].to_owned(),
                generation_prompts: vec![paraphrase.replacen("{}", &subject, 1)],
                subject,
            }
        })
        .collect()
}

/// `n` triples on subjects no case uses.
pub fn distractor_triples(n: usize, seed: u64) -> Vec<KnowledgeTriple> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let subject = format!("distractor {}", i / 4);
            let relation = format!("relation {}", rng.random_range(0..32));
            KnowledgeTriple::new(&subject, &relation, &format!("object {i}")).expect("non-empty labels")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::parse_counterfact;

    #[test]
    fn case_zero_scores_personalized_triple() {
        let text = r#"[{"case_id": 0, "requested_rewrite": {"prompt": "{} works in the field of ",
            "relation_id": "P101(field of work)", "target_new": {"str": "mechanical engineering"},
            "target_true": {"str": "logic"}, "subject": "Alan Turing"},
            "generation_prompts": ["The field that Alan Turing is associated with is"]}]"#;
        let cases = parse_counterfact(text).unwrap();
        let g = generate_fixture(&cases, &FixtureProfile::default()).unwrap();
        let hit = g.fixture.reasoning_scores.iter().any(|e| {
            e.triple.subject() == "Alan Turing"
                && e.triple.object() == "mechanical engineering"
                && e.answer == "mechanical engineering"
                && e.probability >= 0.9
        });
        assert!(hit);
        assert_eq!(g.seed_triples.len(), 2);
    }

    #[test]
    fn synthetic_cases_are_distinct_and_deterministic() {
        let a = synthetic_cases(50, 7);
        assert_eq!(a, synthetic_cases(50, 7));
        for c in &a {
            assert_ne!(c.target_new, c.target_true);
            assert_eq!(c.prompt_template.matches("{}").count(), 1);
        }
        let subjects: std::collections::BTreeSet<_> = a.iter().map(|c| &c.subject).collect();
        assert_eq!(subjects.len(), 50);
    }

    #[test]
    fn distractors_avoid_case_subjects() {
        let d = distractor_triples(100, 1);
        assert_eq!(d.len(), 100);
        assert!(d.iter().all(|z| z.subject().starts_with("distractor")));
    }
}
